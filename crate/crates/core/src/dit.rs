//! Small video diffusion transformer operating on latent token grids.
//!
//! The latent (f, c, h, w) is flattened to f*h*w tokens of c channels,
//! embedded to the model width, tagged with learned temporal and spatial
//! position embeddings plus a sinusoidal timestep embedding, and run through
//! a full-attention transformer stack. Hidden states after every block are
//! exposed so an auxiliary alignment loss can tap an intermediate layer.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::nn::{sinusoidal_embedding, Linear, Param, Parameterized, Trunk, TrunkCache};
use crate::scalar::Scalar;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct DiTConfig {
    /// Latent shape (frames, channels, height, width).
    pub latent: (usize, usize, usize, usize),
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Number of diffusion timesteps accepted by `forward`.
    pub timesteps: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            latent: (4, 96, 8, 8),
            layers: 8,
            width: 192,
            heads: 6,
            timesteps: crate::schedule::DEFAULT_TIMESTEPS,
        }
    }
}

impl DiTConfig {
    pub fn tokens(&self) -> usize {
        let (f, _, h, w) = self.latent;
        f * h * w
    }
}

pub struct ToyDiT<F: Scalar> {
    pub cfg: DiTConfig,
    embed: Linear<F>,
    pos_temporal: Param<F>,
    pos_spatial: Param<F>,
    t_fc1: Linear<F>,
    t_fc2: Linear<F>,
    trunk: Trunk<F>,
    ln_f: crate::nn::LayerNorm<F>,
    head: Linear<F>,
}

pub struct DiTCache<F: Scalar> {
    tokens: Array2<F>,
    t_emb: Array1<F>,
    t_pre: Array2<F>,
    t_act: Array2<F>,
    trunk: TrunkCache<F>,
    trunk_out: Array2<F>,
    ln: crate::nn::LayerNormCache<F>,
    normed: Array2<F>,
}

impl<F: Scalar> ToyDiT<F> {
    pub fn new(cfg: DiTConfig, rng: &mut impl Rng) -> Self {
        let (f, ch, h, w) = cfg.latent;
        let d = cfg.width;
        let std = (1.0 / d as f64).sqrt();
        Self {
            embed: Linear::xavier("dit.embed", ch, d, rng),
            pos_temporal: Param::normal("dit.pos_temporal", &[f, d], 0.02, rng),
            pos_spatial: Param::normal("dit.pos_spatial", &[h * w, d], 0.02, rng),
            t_fc1: Linear::new("dit.t_fc1", d, d, std, rng),
            t_fc2: Linear::new("dit.t_fc2", d, d, std, rng),
            trunk: Trunk::new("dit", cfg.layers, d, cfg.heads, rng),
            ln_f: crate::nn::LayerNorm::new("dit.ln_f", d),
            head: Linear::new("dit.head", d, ch, std, rng),
            cfg,
        }
    }

    /// Flattens (f, c, h, w) to (f*h*w, c) tokens, frame-major.
    fn to_tokens(&self, z: &Array4<F>) -> Array2<F> {
        let (f, ch, h, w) = z.dim();
        let mut tokens = Array2::zeros((f * h * w, ch));
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let n = (fi * h + y) * w + x;
                    for ci in 0..ch {
                        tokens[[n, ci]] = z[[fi, ci, y, x]];
                    }
                }
            }
        }
        tokens
    }

    fn from_tokens(&self, tokens: &Array2<F>) -> Array4<F> {
        let (f, ch, h, w) = self.cfg.latent;
        let mut z = Array4::zeros((f, ch, h, w));
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let n = (fi * h + y) * w + x;
                    for ci in 0..ch {
                        z[[fi, ci, y, x]] = tokens[[n, ci]];
                    }
                }
            }
        }
        z
    }

    fn timestep_features(&self, t: usize) -> (Array1<F>, Array2<F>, Array2<F>, Array1<F>) {
        let emb = sinusoidal_embedding::<F>(t as f64, self.cfg.width);
        let row = emb.clone().insert_axis(Axis(0));
        let pre = self.t_fc1.forward(&row);
        let act = pre.mapv(crate::nn::gelu);
        let out = self.t_fc2.forward(&act);
        (emb, pre, act, out.index_axis(Axis(0), 0).to_owned())
    }

    /// Predicts noise for latent `z` at timestep `t`. Also returns the hidden
    /// state after every block as a feature grid over the latent layout.
    pub fn forward(
        &self,
        z: &Array4<F>,
        t: usize,
    ) -> Result<(Array4<F>, Vec<FeatureGrid<F>>, DiTCache<F>)> {
        self.check_input(z, t)?;
        let (out, hiddens, cache) = self.forward_to(z, t, self.cfg.layers)?;
        Ok((out.expect("full forward returns output"), hiddens, cache))
    }

    /// Runs only the first `depth` blocks, skipping the output head. Used for
    /// feature extraction where the upper layers are never needed. With
    /// `depth == layers` the full model runs and the noise prediction is
    /// returned as well.
    pub fn forward_to(
        &self,
        z: &Array4<F>,
        t: usize,
        depth: usize,
    ) -> Result<(Option<Array4<F>>, Vec<FeatureGrid<F>>, DiTCache<F>)> {
        self.check_input(z, t)?;
        if depth == 0 || depth > self.cfg.layers {
            return Err(Error::InvalidInput(format!(
                "tap depth {depth} outside 1..={}",
                self.cfg.layers
            )));
        }
        let (f, _, h, w) = self.cfg.latent;
        let tokens = self.to_tokens(z);
        let (t_emb, t_pre, t_act, t_vec) = self.timestep_features(t);

        let mut x = self.embed.forward(&tokens);
        let pos_t = self.pos_temporal.value2();
        let pos_s = self.pos_spatial.value2();
        for fi in 0..f {
            for s in 0..h * w {
                let n = fi * h * w + s;
                let mut row = x.row_mut(n);
                row += &pos_t.row(fi);
                row += &pos_s.row(s);
                row += &t_vec;
            }
        }

        let mut hiddens_raw = Vec::with_capacity(depth);
        let mut caches = Vec::with_capacity(depth);
        let mut hcur = x;
        for block in self.trunk.blocks.iter().take(depth) {
            let (next, cache) = block.forward(&hcur);
            hcur = next;
            hiddens_raw.push(hcur.clone());
            caches.push(cache);
        }
        let trunk_out = hcur;

        let mut grids = Vec::with_capacity(hiddens_raw.len());
        for hid in &hiddens_raw {
            let tok3 = hid
                .clone()
                .into_shape_with_order((f, h * w, self.cfg.width))
                .map_err(|e| Error::InvalidShape(e.to_string()))?;
            grids.push(FeatureGrid::from_tokens(tok3, h, w)?);
        }

        let (out, ln, normed) = if depth == self.cfg.layers {
            let (normed, ln) = self.ln_f.forward(&trunk_out);
            let pred = self.head.forward(&normed);
            (Some(self.from_tokens(&pred)), ln, normed)
        } else {
            // placeholder cache entries; backward is only valid after a full
            // forward, which `backward` asserts via the cache depth.
            let (normed, ln) = self.ln_f.forward(&trunk_out);
            (None, ln, normed)
        };

        Ok((
            out,
            grids,
            DiTCache {
                tokens,
                t_emb,
                t_pre,
                t_act,
                trunk: TrunkCache::from_caches(caches),
                trunk_out,
                ln,
                normed,
            },
        ))
    }

    fn check_input(&self, z: &Array4<F>, t: usize) -> Result<()> {
        if z.dim() != self.cfg.latent {
            return Err(Error::InvalidShape(format!(
                "latent shape {:?} does not match configured {:?}",
                z.dim(),
                self.cfg.latent
            )));
        }
        if t >= self.cfg.timesteps {
            return Err(Error::InvalidInput(format!(
                "timestep {t} out of range 0..{}",
                self.cfg.timesteps
            )));
        }
        Ok(())
    }

    /// Accumulates gradients from the noise-prediction loss, plus an optional
    /// auxiliary gradient injected at the hidden state after 1-based layer
    /// `depth` (token layout (f*h*w, width)).
    pub fn backward(
        &mut self,
        cache: &DiTCache<F>,
        d_pred: &Array4<F>,
        aux: Option<(usize, &Array2<F>)>,
    ) {
        let d_tokens = self.to_tokens(d_pred);
        let d_normed = self.head.backward(&cache.normed, &d_tokens);
        let d_trunk_out = self.ln_f.backward(&cache.ln, &d_normed);
        let dx = self
            .trunk
            .backward(&cache.trunk, &d_trunk_out, aux);
        self.finish_backward(cache, &dx);
    }

    /// Backward when only the auxiliary tap gradient exists (no diffusion
    /// head in the graph), e.g. measuring gradient flow through the
    /// alignment branch alone.
    pub fn backward_aux_only(&mut self, cache: &DiTCache<F>, depth: usize, d_hidden: &Array2<F>) {
        let zero = Array2::zeros(cache.trunk_out.dim());
        let dx = self.trunk.backward(&cache.trunk, &zero, Some((depth, d_hidden)));
        self.finish_backward(cache, &dx);
    }

    fn finish_backward(&mut self, cache: &DiTCache<F>, dx: &Array2<F>) {
        let (f, _, h, w) = self.cfg.latent;
        let hw = h * w;
        let mut d_tvec = Array1::<F>::zeros(self.cfg.width);
        {
            let mut pt = self.pos_temporal.grad2_mut();
            let mut ps = self.pos_spatial.grad2_mut();
            for fi in 0..f {
                for s in 0..hw {
                    let row = dx.row(fi * hw + s);
                    let mut ptr = pt.row_mut(fi);
                    ptr += &row;
                    let mut psr = ps.row_mut(s);
                    psr += &row;
                    d_tvec += &row;
                }
            }
        }
        // timestep MLP: same vector was added to every token
        let d_tout = d_tvec.insert_axis(Axis(0));
        let d_act = self.t_fc2.backward(&cache.t_act, &d_tout);
        let d_pre = &d_act * &cache.t_pre.mapv(crate::nn::gelu_prime);
        let _ = self.t_fc1.backward(&cache.t_emb.clone().insert_axis(Axis(0)), &d_pre);
        let _ = self.embed.backward(&cache.tokens, dx);
    }
}

impl<F: Scalar> Parameterized<F> for ToyDiT<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.embed.visit_params(f);
        f(&mut self.pos_temporal);
        f(&mut self.pos_spatial);
        self.t_fc1.visit_params(f);
        self.t_fc2.visit_params(f);
        self.trunk.visit_params(f);
        self.ln_f.visit_params(f);
        self.head.visit_params(f);
    }
}
