//! Self-supervised video feature model: tube-patch transformer encoder
//! pretrained with masked reconstruction, then frozen as the relation
//! target during distillation.

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::dataset::{clip_path, load_clip, Manifest, Split};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::{Linear, Param, Parameterized, Trunk, TrunkCache};
use crate::optim::{AdamW, OptimConfig};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct VfmConfig {
    /// Input video shape (frames, channels, height, width).
    pub video: (usize, usize, usize, usize),
    /// Tube patch extent (temporal, spatial).
    pub patch: (usize, usize),
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
}

impl Default for VfmConfig {
    fn default() -> Self {
        Self {
            video: (8, 3, 32, 32),
            patch: (2, 4),
            layers: 6,
            width: 128,
            heads: 4,
        }
    }
}

impl VfmConfig {
    pub fn grid(&self) -> (usize, usize, usize) {
        let (f, _, h, w) = self.video;
        (f / self.patch.0, h / self.patch.1, w / self.patch.1)
    }

    pub fn patch_dim(&self) -> usize {
        let (_, ch, _, _) = self.video;
        ch * self.patch.0 * self.patch.1 * self.patch.1
    }

    pub fn validate(&self) -> Result<()> {
        let (f, _, h, w) = self.video;
        if f % self.patch.0 != 0 || h % self.patch.1 != 0 || w % self.patch.1 != 0 {
            return Err(Error::InvalidShape(format!(
                "video {:?} not divisible by patch {:?}",
                self.video, self.patch
            )));
        }
        Ok(())
    }
}

pub struct ToyVFM<F: Scalar> {
    pub cfg: VfmConfig,
    embed: Linear<F>,
    pos_temporal: Param<F>,
    pos_spatial: Param<F>,
    trunk: Trunk<F>,
    ln_f: crate::nn::LayerNorm<F>,
}

pub struct VfmCache<F: Scalar> {
    patches: Array2<F>,
    rows: Vec<usize>,
    trunk: TrunkCache<F>,
    ln: crate::nn::LayerNormCache<F>,
}

impl<F: Scalar> ToyVFM<F> {
    pub fn new(cfg: VfmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (ft, hy, wx) = cfg.grid();
        let d = cfg.width;
        Ok(Self {
            embed: Linear::xavier("vfm.embed", cfg.patch_dim(), d, rng),
            pos_temporal: Param::normal("vfm.pos_temporal", &[ft, d], 0.02, rng),
            pos_spatial: Param::normal("vfm.pos_spatial", &[hy * wx, d], 0.02, rng),
            trunk: Trunk::new("vfm", cfg.layers, d, cfg.heads, rng),
            ln_f: crate::nn::LayerNorm::new("vfm.ln_f", d),
            cfg,
        })
    }

    /// (f, c, h, w) video -> (tokens, patch_dim) tube patches, frame-major.
    pub fn patchify(&self, video: &Array4<F>) -> Result<Array2<F>> {
        if video.dim() != self.cfg.video {
            return Err(Error::InvalidShape(format!(
                "video shape {:?} does not match configured {:?}",
                video.dim(),
                self.cfg.video
            )));
        }
        let (_, ch, _, _) = self.cfg.video;
        let (ft, hy, wx) = self.cfg.grid();
        let (pt, ps) = self.cfg.patch;
        let mut out = Array2::zeros((ft * hy * wx, self.cfg.patch_dim()));
        for tf in 0..ft {
            for gy in 0..hy {
                for gx in 0..wx {
                    let n = (tf * hy + gy) * wx + gx;
                    let mut k = 0;
                    for dt in 0..pt {
                        for ci in 0..ch {
                            for dy in 0..ps {
                                for dx in 0..ps {
                                    out[[n, k]] =
                                        video[[tf * pt + dt, ci, gy * ps + dy, gx * ps + dx]];
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encodes a subset of the patch rows: all of them for a clean forward
    /// pass, only the visible ones during masked pretraining. `rows` are
    /// indices into the full frame-major token order and select both the
    /// patch rows and the positional embeddings; attention runs over just
    /// these tokens.
    fn encode_rows(&self, patches: &Array2<F>, rows: &[usize]) -> (Array2<F>, VfmCache<F>) {
        let (_, hy, wx) = self.cfg.grid();
        let hw = hy * wx;
        let sub = if rows.len() == patches.nrows() {
            patches.clone()
        } else {
            let mut sub = Array2::zeros((rows.len(), patches.ncols()));
            for (i, &n) in rows.iter().enumerate() {
                sub.row_mut(i).assign(&patches.row(n));
            }
            sub
        };
        let mut x = self.embed.forward(&sub);
        let pos_t = self.pos_temporal.value2();
        let pos_s = self.pos_spatial.value2();
        for (i, &n) in rows.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &pos_t.row(n / hw);
            row += &pos_s.row(n % hw);
        }
        let (trunk_out, _, trunk) = self.trunk.forward(&x);
        let (normed, ln) = self.ln_f.forward(&trunk_out);
        (
            normed,
            VfmCache {
                patches: sub,
                rows: rows.to_vec(),
                trunk,
                ln,
            },
        )
    }

    /// Feature grid (f_g, h_g, w_g, width) for a clean video clip.
    pub fn forward(&self, video: &Array4<F>) -> Result<FeatureGrid<F>> {
        let patches = self.patchify(video)?;
        let all: Vec<usize> = (0..patches.nrows()).collect();
        let (normed, _) = self.encode_rows(&patches, &all);
        let (ft, hy, wx) = self.cfg.grid();
        let tok3 = normed
            .into_shape_with_order((ft, hy * wx, self.cfg.width))
            .map_err(|e| Error::InvalidShape(e.to_string()))?;
        FeatureGrid::from_tokens(tok3, hy, wx)
    }

    /// Gradients through the encoder; `d_out` is (encoded rows, width) at the
    /// normalized output, aligned with the rows passed to `encode_rows`.
    fn backward(&mut self, cache: &VfmCache<F>, d_out: &Array2<F>) {
        let (_, hy, wx) = self.cfg.grid();
        let hw = hy * wx;
        let d_trunk_out = self.ln_f.backward(&cache.ln, d_out);
        let dx = self.trunk.backward(&cache.trunk, &d_trunk_out, None);
        {
            let mut pt = self.pos_temporal.grad2_mut();
            let mut ps = self.pos_spatial.grad2_mut();
            for (i, &n) in cache.rows.iter().enumerate() {
                let row = dx.row(i);
                let mut ptr = pt.row_mut(n / hw);
                ptr += &row;
                let mut psr = ps.row_mut(n % hw);
                psr += &row;
            }
        }
        let _ = self.embed.backward(&cache.patches, &dx);
    }
}

impl<F: Scalar> Parameterized<F> for ToyVFM<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.embed.visit_params(f);
        f(&mut self.pos_temporal);
        f(&mut self.pos_spatial);
        self.trunk.visit_params(f);
        self.ln_f.visit_params(f);
    }
}

// ---------------------------------------------------------------------------
// Masked-reconstruction pretraining.

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub vfm: VfmConfig,
    /// Fraction of spatial positions masked across all temporal indices.
    pub mask_ratio: f64,
    pub steps: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub decoder_layers: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            vfm: VfmConfig::default(),
            mask_ratio: 0.9,
            steps: 300,
            batch: 4,
            optim: OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            seed: 0,
            decoder_layers: 2,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.vfm.validate()?;
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidInput(format!(
                "mask ratio {} outside [0, 1]",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

fn visible_rows(n_tok: usize, masked: &[usize]) -> Vec<usize> {
    let mut hidden = vec![false; n_tok];
    for &n in masked {
        hidden[n] = true;
    }
    (0..n_tok).filter(|&n| !hidden[n]).collect()
}

/// Encoder plus the throwaway reconstruction head used only in pretraining.
pub struct VfmPretrainer<F: Scalar> {
    pub vfm: ToyVFM<F>,
    mask_token: Param<F>,
    dec_pos: Param<F>,
    dec_trunk: Trunk<F>,
    dec_head: Linear<F>,
}

impl<F: Scalar> VfmPretrainer<F> {
    pub fn new(cfg: &PretrainConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let vfm = ToyVFM::new(cfg.vfm.clone(), rng)?;
        let d = cfg.vfm.width;
        let (ft, hy, wx) = vfm.cfg.grid();
        Ok(Self {
            mask_token: Param::normal("mae.mask_token", &[d], 0.02, rng),
            // the decoder gets its own positional table so masked rows are
            // distinguishable even while the encoder's mask features are flat
            dec_pos: Param::normal("mae.dec_pos", &[ft * hy * wx, d], 0.02, rng),
            dec_trunk: Trunk::new("mae.dec", cfg.decoder_layers, d, cfg.vfm.heads, rng),
            dec_head: Linear::xavier("mae.head", d, cfg.vfm.patch_dim(), rng),
            vfm,
        })
    }

    /// Spatial positions to mask for one clip; every temporal index of a
    /// chosen position is masked (tube masking).
    pub fn sample_mask(&self, ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
        let (ft, hy, wx) = self.vfm.cfg.grid();
        let hw = hy * wx;
        let n_masked = (ratio * hw as f64).round() as usize;
        let mut positions: Vec<usize> = (0..hw).collect();
        positions.shuffle(rng);
        positions.truncate(n_masked);
        let mut rows = Vec::with_capacity(n_masked * ft);
        for tf in 0..ft {
            for &s in &positions {
                rows.push(tf * hw + s);
            }
        }
        rows.sort_unstable();
        rows
    }

    /// Training loss for one clip given the masked rows: mean squared error
    /// over masked patches, or over all patches when nothing is masked
    /// (plain autoencoding).
    pub fn loss_and_grad(
        &mut self,
        video: &Array4<F>,
        masked_rows: &[usize],
        accumulate: bool,
    ) -> Result<f64> {
        let patches = self.vfm.patchify(video)?;
        let n_tok = patches.nrows();
        let visible = visible_rows(n_tok, masked_rows);
        // encoder sees only the visible tokens; the decoder works on the full
        // sequence with mask tokens standing in for the hidden ones
        let (encoded, cache) = self.vfm.encode_rows(&patches, &visible);
        let width = encoded.ncols();
        let mut dec_in = Array2::zeros((n_tok, width));
        let tok = self.mask_token.value1();
        for &n in masked_rows {
            dec_in.row_mut(n).assign(&tok);
        }
        for (i, &n) in visible.iter().enumerate() {
            dec_in.row_mut(n).assign(&encoded.row(i));
        }
        dec_in += &self.dec_pos.value2();
        let (dec_out, _, dec_cache) = self.dec_trunk.forward(&dec_in);
        let recon = self.dec_head.forward(&dec_out);

        let rows: Vec<usize> = if masked_rows.is_empty() {
            (0..n_tok).collect()
        } else {
            masked_rows.to_vec()
        };
        let count = (rows.len() * patches.ncols()) as f64;
        let mut loss = 0.0;
        let mut d_recon = Array2::<F>::zeros(recon.dim());
        for &n in &rows {
            for k in 0..patches.ncols() {
                let diff = (recon[[n, k]] - patches[[n, k]]).to_f64().unwrap();
                loss += diff * diff;
                d_recon[[n, k]] = c(2.0 * diff / count);
            }
        }
        loss /= count;

        if accumulate {
            let d_dec_out = self.dec_head.backward(&dec_out, &d_recon);
            let d_dec_in = self.dec_trunk.backward(&dec_cache, &d_dec_out, None);
            self.dec_pos.grad2_mut().scaled_add(F::one(), &d_dec_in.view());
            {
                let mut tg = self
                    .mask_token
                    .grad
                    .view_mut()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                for &n in masked_rows {
                    tg += &d_dec_in.row(n);
                }
            }
            let mut d_encoded = Array2::zeros(encoded.dim());
            for (i, &n) in visible.iter().enumerate() {
                d_encoded.row_mut(i).assign(&d_dec_in.row(n));
            }
            self.vfm.backward(&cache, &d_encoded);
        }
        Ok(loss)
    }

    /// Unweighted mean squared error over the masked patches; the evaluation
    /// metric, directly comparable to a constant-predictor baseline.
    pub fn eval_mse(&self, video: &Array4<F>, masked_rows: &[usize]) -> Result<f64> {
        let patches = self.vfm.patchify(video)?;
        let n_tok = patches.nrows();
        let visible = visible_rows(n_tok, masked_rows);
        let (encoded, _) = self.vfm.encode_rows(&patches, &visible);
        let width = encoded.ncols();
        let mut dec_in = Array2::zeros((n_tok, width));
        let tok = self.mask_token.value1();
        for &n in masked_rows {
            dec_in.row_mut(n).assign(&tok);
        }
        for (i, &n) in visible.iter().enumerate() {
            dec_in.row_mut(n).assign(&encoded.row(i));
        }
        dec_in += &self.dec_pos.value2();
        let (dec_out, _, _) = self.dec_trunk.forward(&dec_in);
        let recon = self.dec_head.forward(&dec_out);
        let rows: Vec<usize> = if masked_rows.is_empty() {
            (0..n_tok).collect()
        } else {
            masked_rows.to_vec()
        };
        let count = (rows.len() * patches.ncols()) as f64;
        let mut loss = 0.0;
        for &n in &rows {
            for k in 0..patches.ncols() {
                let diff = (recon[[n, k]] - patches[[n, k]]).to_f64().unwrap();
                loss += diff * diff;
            }
        }
        Ok(loss / count)
    }
}

impl<F: Scalar> Parameterized<F> for VfmPretrainer<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.vfm.visit_params(f);
        f(&mut self.mask_token);
        f(&mut self.dec_pos);
        self.dec_trunk.visit_params(f);
        self.dec_head.visit_params(f);
    }
}

pub struct PretrainReport {
    pub final_train_loss: f64,
    pub eval_loss: f64,
    pub baseline_loss: f64,
    pub losses: Vec<f64>,
}

/// Pretrains the feature model on the train split of a dataset and returns
/// the frozen encoder. Errors if the loss diverges or fails to beat the
/// constant mean predictor by the required margin.
pub fn pretrain_vfm(
    root: &Path,
    manifest: &Manifest,
    cfg: &PretrainConfig,
) -> Result<(ToyVFM<f32>, PretrainReport)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = VfmPretrainer::<f32>::new(cfg, &mut rng)?;
    let mut opt = AdamW::new(cfg.optim);

    let train: Vec<_> = manifest.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Training("empty train split".into()));
    }
    // clips are tiny; hold the whole train split in memory
    let cap = train.len().min(4096);
    let mut clips = Vec::with_capacity(cap);
    let frames = cfg.vfm.video.0;
    for rec in train.iter().take(cap) {
        clips.push(load_clip(&clip_path(root, rec), frames)?);
    }
    let mean = {
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for clip in &clips {
            acc += clip.data().iter().map(|&v| v as f64).sum::<f64>();
            n += clip.data().len();
        }
        (acc / n as f64) as f32
    };

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut recent = std::collections::VecDeque::with_capacity(16);
    let warmup = (cfg.steps / 20).clamp(1, 200);
    for step in 0..cfg.steps {
        // linear warmup then cosine decay to a tenth of the base rate
        opt.cfg.lr = if step < warmup {
            cfg.optim.lr * (step + 1) as f64 / warmup as f64
        } else {
            let t = (step - warmup) as f64 / (cfg.steps - warmup).max(1) as f64;
            cfg.optim.lr * (0.55 + 0.45 * (std::f64::consts::PI * t).cos())
        };
        model.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let clip = &clips[rng.gen_range(0..clips.len())];
            let video = clip.data().mapv(|v| v);
            let rows = model.sample_mask(cfg.mask_ratio, &mut rng);
            batch_loss += model.loss_and_grad(&video, &rows, true)?;
        }
        batch_loss /= cfg.batch as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Training(format!(
                "pretraining diverged at step {step}: loss {batch_loss}"
            )));
        }
        // scale accumulated grads to the batch mean
        let scale = 1.0 / cfg.batch as f32;
        model.visit_params(&mut |p| p.grad.mapv_inplace(|g| g * scale));
        opt.clip_grads(&mut model);
        opt.update(&mut model);
        losses.push(batch_loss);
        if recent.len() == 16 {
            recent.pop_front();
        }
        recent.push_back(batch_loss);
    }
    let final_train_loss = recent.iter().sum::<f64>() / recent.len() as f64;

    // held-out evaluation against the constant mean predictor, on the same
    // masked pixels (validation split, falling back to train if empty)
    let held_out: Vec<_> = {
        let v: Vec<_> = manifest.split(Split::Val).collect();
        if v.is_empty() {
            train.iter().take(32).cloned().collect()
        } else {
            v
        }
    };
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bf0_3635);
    let mut eval_loss = 0.0;
    let mut baseline_loss = 0.0;
    let eval_cap = held_out.len().min(64);
    for rec in held_out.iter().take(eval_cap) {
        let clip = load_clip(&clip_path(root, rec), frames)?;
        let video = clip.data().clone();
        let rows = model.sample_mask(cfg.mask_ratio, &mut eval_rng);
        eval_loss += model.eval_mse(&video, &rows)?;
        let patches = model.vfm.patchify(&video)?;
        let masked: Vec<usize> = if rows.is_empty() {
            (0..patches.nrows()).collect()
        } else {
            rows.clone()
        };
        let mut acc = 0.0;
        for &n in &masked {
            for k in 0..patches.ncols() {
                let d = (patches[[n, k]] - mean) as f64;
                acc += d * d;
            }
        }
        baseline_loss += acc / (masked.len() * patches.ncols()) as f64;
    }
    eval_loss /= eval_cap as f64;
    baseline_loss /= eval_cap as f64;

    if eval_loss >= 0.7 * baseline_loss {
        return Err(Error::Training(format!(
            "pretraining underfit: held-out loss {eval_loss:.5} vs mean-predictor baseline \
             {baseline_loss:.5} (needs < 70%); train loss head {:?} tail {:?}",
            &losses[..losses.len().min(5)],
            &losses[losses.len().saturating_sub(5)..]
        )));
    }
    Ok((
        model.vfm,
        PretrainReport {
            final_train_loss,
            eval_loss,
            baseline_loss,
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> VfmConfig {
        VfmConfig {
            video: (4, 3, 8, 8),
            patch: (2, 4),
            layers: 2,
            width: 16,
            heads: 2,
        }
    }

    #[test]
    fn patchify_layout_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vfm = ToyVFM::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let video = Array4::from_shape_fn((4, 3, 8, 8), |(t, c, y, x)| {
            (t * 1000 + c * 100 + y * 10 + x) as f64
        });
        let patches = vfm.patchify(&video).unwrap();
        assert_eq!(patches.dim(), (2 * 2 * 2, 3 * 2 * 4 * 4));
        // token for grid cell (tf=1, gy=0, gx=1): frames 2..4, pixels y 0..4, x 4..8
        let n = (1 * 2 + 0) * 2 + 1;
        // first element: dt=0 -> frame 2, c=0, dy=0, dx=0 -> pixel (0, 4)
        assert_eq!(patches[[n, 0]], 2004.0);
        // dt=1, c=2, dy=3, dx=2 -> k = ((1*3 + 2)*4 + 3)*4 + 2
        let k = ((1 * 3 + 2) * 4 + 3) * 4 + 2;
        assert_eq!(patches[[n, k]], 3236.0);
    }

    #[test]
    fn forward_grid_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vfm = ToyVFM::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let video = Array4::from_shape_fn((4, 3, 8, 8), |(t, c, y, x)| {
            ((t + c + y + x) as f64 * 0.37).sin() * 0.5
        });
        let grid = vfm.forward(&video).unwrap();
        assert_eq!(grid.data().dim(), (2, 2, 2, 16));
    }

    #[test]
    fn tube_mask_covers_all_frames_of_chosen_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PretrainConfig {
            vfm: tiny_cfg(),
            ..PretrainConfig::default()
        };
        let model = VfmPretrainer::<f64>::new(&cfg, &mut rng).unwrap();
        let rows = model.sample_mask(0.5, &mut rng);
        let (ft, hy, wx) = tiny_cfg().grid();
        let hw = hy * wx;
        assert_eq!(rows.len(), ft * (hw / 2));
        // each masked spatial index must appear once per temporal slice
        let mut per_pos = std::collections::HashMap::new();
        for r in &rows {
            *per_pos.entry(r % hw).or_insert(0usize) += 1;
        }
        assert!(per_pos.values().all(|&n| n == ft));
    }

    #[test]
    fn pretrainer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PretrainConfig {
            vfm: tiny_cfg(),
            ..PretrainConfig::default()
        };
        let mut model = VfmPretrainer::<f64>::new(&cfg, &mut rng).unwrap();
        let video = Array4::from_shape_fn((4, 3, 8, 8), |(t, c, y, x)| {
            ((t * 3 + c * 7 + y + x * 2) as f64 * 0.61).sin() * 0.4
        });
        let rows = model.sample_mask(0.5, &mut rng);

        model.zero_grads();
        model.loss_and_grad(&video, &rows, true).unwrap();
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        model.visit_params(&mut |p| {
            grads.push(p.grad.iter().cloned().collect());
            names.push(p.name.clone());
        });

        for (pi, name) in names.iter().enumerate() {
            let len = grads[pi].len();
            for k in [0, len / 2, len - 1] {
                let eps = 1e-5;
                let mut vals = [0.0; 2];
                for (j, sign) in [1.0, -1.0].iter().enumerate() {
                    let mut idx = 0;
                    model.visit_params(&mut |p| {
                        if idx == pi {
                            p.value.as_slice_mut().unwrap()[k] += sign * eps;
                        }
                        idx += 1;
                    });
                    vals[j] = model.loss_and_grad(&video, &rows, false).unwrap();
                    let mut idx = 0;
                    model.visit_params(&mut |p| {
                        if idx == pi {
                            p.value.as_slice_mut().unwrap()[k] -= sign * eps;
                        }
                        idx += 1;
                    });
                }
                let fd = (vals[0] - vals[1]) / (2.0 * eps);
                let an = grads[pi][k];
                let denom = fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "{name}[{k}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn masked_rows_do_not_leak_input_pixels() {
        // changing the video inside a masked tube must not change the model's
        // reconstruction of the other patches: masked rows never enter the
        // encoder, so only the loss target moves.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = PretrainConfig {
            vfm: tiny_cfg(),
            ..PretrainConfig::default()
        };
        let mut model = VfmPretrainer::<f64>::new(&cfg, &mut rng).unwrap();
        let video = Array4::from_shape_fn((4, 3, 8, 8), |(t, c, y, x)| {
            ((t + c + y + x) as f64 * 0.3).cos() * 0.3
        });
        let rows = vec![0usize, 4]; // spatial position 0 at both frames (hw = 4)
        let visible = visible_rows(8, &rows);

        let patches1 = model.vfm.patchify(&video).unwrap();
        let (enc1, _) = model.vfm.encode_rows(&patches1, &visible);

        let mut video2 = video.clone();
        // perturb pixels inside masked grid cell (0, 0) in every frame
        for t in 0..4 {
            for ci in 0..3 {
                video2[[t, ci, 0, 0]] += 10.0;
            }
        }
        let patches2 = model.vfm.patchify(&video2).unwrap();
        let (enc2, _) = model.vfm.encode_rows(&patches2, &visible);
        let diff = (&enc1 - &enc2).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "masked pixels leaked into encoding: {diff}");

        // but the loss still moves, because the reconstruction target moved
        let loss1 = model.loss_and_grad(&video, &rows, false).unwrap();
        let loss2 = model.loss_and_grad(&video2, &rows, false).unwrap();
        assert!((loss2 - loss1).abs() > 1e-9, "masked target shift ignored");
    }
}
