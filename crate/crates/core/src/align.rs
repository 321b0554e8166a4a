//! Bridges diffusion hidden states and encoder features: token-wise
//! projector, trilinear grid interpolation, first-latent-frame exclusion,
//! and encoder input preparation strategies.

use ndarray::{s, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, VideoTensor};
use crate::nn::{gelu, gelu_prime, Linear, Param, Parameterized};
use crate::scalar::{c, Scalar};

/// Source and target (f, h, w) shapes for grid interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub source: (usize, usize, usize),
    pub target: (usize, usize, usize),
}

impl ShapeSpec {
    pub fn new(source: (usize, usize, usize), target: (usize, usize, usize)) -> Result<Self> {
        if target.0 == 0 || target.1 == 0 || target.2 == 0 {
            return Err(Error::InvalidShape("target dims must be >= 1".into()));
        }
        Ok(Self { source, target })
    }
}

// ---------------------------------------------------------------------------

/// Two-layer token-wise perceptron mapping the denoiser width to the encoder
/// feature width.
pub struct Projector<F: Scalar> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct ProjectorCache<F: Scalar> {
    x: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
    hw: (usize, usize),
}

impl<F: Scalar> Projector<F> {
    /// Hidden width defaults to twice the output width.
    pub fn new(in_width: usize, out_width: usize, rng: &mut impl Rng) -> Self {
        Self::with_hidden(in_width, 2 * out_width, out_width, rng)
    }

    pub fn with_hidden(
        in_width: usize,
        hidden: usize,
        out_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::xavier("projector.fc1", in_width, hidden, rng),
            fc2: Linear::xavier("projector.fc2", hidden, out_width, rng),
        }
    }

    /// Identity weights on both layers (square widths); forward reduces to
    /// the elementwise nonlinearity.
    pub fn identity(width: usize) -> Self {
        Self {
            fc1: Linear::identity("projector.fc1", width),
            fc2: Linear::identity("projector.fc2", width),
        }
    }

    pub fn in_width(&self) -> usize {
        self.fc1.w.value2().dim().0
    }

    pub fn out_width(&self) -> usize {
        self.fc2.w.value2().dim().1
    }

    pub fn forward(&self, hidden: &FeatureGrid<F>) -> Result<(FeatureGrid<F>, ProjectorCache<F>)> {
        let (f, h, w, d) = hidden.dim();
        if d != self.in_width() {
            return Err(Error::InvalidShape(format!(
                "projector expects width {}, got {d}",
                self.in_width()
            )));
        }
        let x = hidden.flat_tokens();
        let pre = self.fc1.forward(&x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act);
        let out = y
            .into_shape_with_order((f, h, w, self.out_width()))
            .expect("contiguous");
        Ok((
            FeatureGrid::from_raw(out),
            ProjectorCache {
                x,
                pre,
                act,
                hw: (h, w),
            },
        ))
    }

    /// Accumulates parameter grads; returns the gradient w.r.t. the hidden
    /// grid.
    pub fn backward(&mut self, cache: &ProjectorCache<F>, dout: &FeatureGrid<F>) -> FeatureGrid<F> {
        let dy = dout.flat_tokens();
        let dact = self.fc2.backward(&cache.act, &dy);
        let dpre = &dact * &cache.pre.mapv(gelu_prime);
        let dx = self.fc1.backward(&cache.x, &dpre);
        let (n, d) = dx.dim();
        let (h, w) = cache.hw;
        let f = n / (h * w);
        FeatureGrid::from_raw(
            dx.into_shape_with_order((f, h, w, d)).expect("contiguous"),
        )
    }
}

impl<F: Scalar> Parameterized<F> for Projector<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
}

// ---------------------------------------------------------------------------

/// Corner-aligned 1D interpolation taps: target index -> (lo, hi, hi_weight).
fn axis_taps(source: usize, target: usize) -> Vec<(usize, usize, f64)> {
    (0..target)
        .map(|i| {
            if target == 1 || source == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (source - 1) as f64 / (target - 1) as f64;
            let lo = (pos.floor() as usize).min(source - 1);
            let hi = (lo + 1).min(source - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Trilinear interpolation of a feature grid over (f, h, w); channels pass
/// through. Corner-aligned, exact identity when source equals target.
pub fn interpolate_to<F: Scalar>(grid: &FeatureGrid<F>, spec: &ShapeSpec) -> Result<FeatureGrid<F>> {
    let (f, h, w, d) = grid.dim();
    if (f, h, w) != spec.source {
        return Err(Error::InvalidShape(format!(
            "grid shape ({f},{h},{w}) does not match spec source {:?}",
            spec.source
        )));
    }
    let (tf, th, tw) = spec.target;
    if (f, h, w) == (tf, th, tw) {
        return Ok(grid.clone());
    }
    let ft = axis_taps(f, tf);
    let ht = axis_taps(h, th);
    let wt = axis_taps(w, tw);
    let src = grid.data();
    let mut out = Array4::<F>::zeros((tf, th, tw, d));
    for (ti, &(f0, f1, fw)) in ft.iter().enumerate() {
        for (tj, &(h0, h1, hw_)) in ht.iter().enumerate() {
            for (tk, &(w0, w1, ww)) in wt.iter().enumerate() {
                let mut cell = out.slice_mut(s![ti, tj, tk, ..]);
                for (fi, fwt) in [(f0, 1.0 - fw), (f1, fw)] {
                    if fwt == 0.0 {
                        continue;
                    }
                    for (hi, hwt) in [(h0, 1.0 - hw_), (h1, hw_)] {
                        if hwt == 0.0 {
                            continue;
                        }
                        for (wi, wwt) in [(w0, 1.0 - ww), (w1, ww)] {
                            if wwt == 0.0 {
                                continue;
                            }
                            let weight = c::<F>(fwt * hwt * wwt);
                            cell.scaled_add(weight, &src.slice(s![fi, hi, wi, ..]));
                        }
                    }
                }
            }
        }
    }
    Ok(FeatureGrid::from_raw(out))
}

/// Transpose of [`interpolate_to`]: scatters a gradient on the target grid
/// back onto the source grid.
pub fn interpolate_to_backward<F: Scalar>(
    dout: &FeatureGrid<F>,
    spec: &ShapeSpec,
) -> FeatureGrid<F> {
    let (sf, sh, sw) = spec.source;
    let (tf, th, tw) = spec.target;
    if (sf, sh, sw) == (tf, th, tw) {
        return dout.clone();
    }
    let d = dout.channels();
    let ft = axis_taps(sf, tf);
    let ht = axis_taps(sh, th);
    let wt = axis_taps(sw, tw);
    let g = dout.data();
    let mut out = Array4::<F>::zeros((sf, sh, sw, d));
    for (ti, &(f0, f1, fw)) in ft.iter().enumerate() {
        for (tj, &(h0, h1, hw_)) in ht.iter().enumerate() {
            for (tk, &(w0, w1, ww)) in wt.iter().enumerate() {
                let cell = g.slice(s![ti, tj, tk, ..]);
                for (fi, fwt) in [(f0, 1.0 - fw), (f1, fw)] {
                    if fwt == 0.0 {
                        continue;
                    }
                    for (hi, hwt) in [(h0, 1.0 - hw_), (h1, hw_)] {
                        if hwt == 0.0 {
                            continue;
                        }
                        for (wi, wwt) in [(w0, 1.0 - ww), (w1, ww)] {
                            if wwt == 0.0 {
                                continue;
                            }
                            let weight = c::<F>(fwt * hwt * wwt);
                            out.slice_mut(s![fi, hi, wi, ..]).scaled_add(weight, &cell);
                        }
                    }
                }
            }
        }
    }
    FeatureGrid::from_raw(out)
}

/// Removes temporal index 0; shape (f-1, h, w, d).
pub fn drop_first_latent_frame<F: Scalar>(grid: &FeatureGrid<F>) -> Result<FeatureGrid<F>> {
    let (f, ..) = grid.dim();
    if f < 2 {
        return Err(Error::InvalidShape(
            "cannot drop the only latent frame".into(),
        ));
    }
    Ok(FeatureGrid::from_raw(
        grid.data().slice(s![1.., .., .., ..]).to_owned(),
    ))
}

/// Backward of [`drop_first_latent_frame`]: zero-pads frame 0.
pub fn drop_first_latent_frame_backward<F: Scalar>(dout: &FeatureGrid<F>) -> FeatureGrid<F> {
    let (f, h, w, d) = dout.dim();
    let mut full = Array4::<F>::zeros((f + 1, h, w, d));
    full.slice_mut(s![1.., .., .., ..]).assign(dout.data());
    FeatureGrid::from_raw(full)
}

// ---------------------------------------------------------------------------

/// How a clip is reduced to fit the encoder's compute budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VfmInputStrategy {
    /// All frames, bilinearly resized to the target resolution. The default.
    AllFramesLowRes,
    /// Temporally contiguous frame groups at native resolution.
    FrameGroupsHighRes,
    /// Spatial crops at native resolution tiling each frame.
    SpatialCropsHighRes,
}

fn bilinear_resize_frame(src: &ndarray::ArrayView2<'_, f32>, th: usize, tw: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let ht = axis_taps(h, th);
    let wt = axis_taps(w, tw);
    Array2::from_shape_fn((th, tw), |(i, j)| {
        let (h0, h1, hw_) = ht[i];
        let (w0, w1, ww) = wt[j];
        let v00 = src[[h0, w0]] as f64;
        let v01 = src[[h0, w1]] as f64;
        let v10 = src[[h1, w0]] as f64;
        let v11 = src[[h1, w1]] as f64;
        ((v00 * (1.0 - ww) + v01 * ww) * (1.0 - hw_) + (v10 * (1.0 - ww) + v11 * ww) * hw_) as f32
    })
}

/// Prepares one or more clips for the encoder under the given strategy.
pub fn prepare_vfm_input(
    video: &VideoTensor,
    strategy: VfmInputStrategy,
    target_res: (usize, usize),
) -> Result<Vec<VideoTensor>> {
    let (f, ch, h, w) = video.dim();
    let (th, tw) = target_res;
    if th == 0 || tw == 0 || th > h || tw > w {
        return Err(Error::InvalidInput(format!(
            "target resolution ({th},{tw}) must be in [1,{h}]x[1,{w}]"
        )));
    }
    match strategy {
        VfmInputStrategy::AllFramesLowRes => {
            if (th, tw) == (h, w) {
                return Ok(vec![video.clone()]);
            }
            let mut out = Array4::zeros((f, ch, th, tw));
            for t in 0..f {
                for cidx in 0..ch {
                    let frame = video.data().slice(s![t, cidx, .., ..]);
                    out.slice_mut(s![t, cidx, .., ..])
                        .assign(&bilinear_resize_frame(&frame, th, tw));
                }
            }
            Ok(vec![VideoTensor::new(out)?])
        }
        VfmInputStrategy::FrameGroupsHighRes => {
            // group length keeps per-group pixel volume near the budget of the
            // low-res strategy
            let budget = (f * th * tw) as f64 / (h * w) as f64;
            let g = (budget.round() as usize).clamp(1, f);
            let mut groups = Vec::new();
            let mut start = 0;
            while start < f {
                let end = (start + g).min(f);
                groups.push(VideoTensor::new(
                    video.data().slice(s![start..end, .., .., ..]).to_owned(),
                )?);
                start = end;
            }
            Ok(groups)
        }
        VfmInputStrategy::SpatialCropsHighRes => {
            if h % th != 0 || w % tw != 0 {
                return Err(Error::InvalidInput(format!(
                    "crop size ({th},{tw}) must tile the frame ({h},{w}) exactly"
                )));
            }
            let mut crops = Vec::new();
            for by in 0..h / th {
                for bx in 0..w / tw {
                    crops.push(VideoTensor::new(
                        video
                            .data()
                            .slice(s![
                                ..,
                                ..,
                                by * th..(by + 1) * th,
                                bx * tw..(bx + 1) * tw
                            ])
                            .to_owned(),
                    )?);
                }
            }
            Ok(crops)
        }
    }
}

// ---------------------------------------------------------------------------

/// The configured hidden-state alignment path: project, optionally drop the
/// first latent frame, interpolate onto the target grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlignPathConfig {
    pub drop_first_frame: bool,
    pub target: (usize, usize, usize),
}

pub struct AlignPathCache<F: Scalar> {
    projector: ProjectorCache<F>,
    interp_spec: ShapeSpec,
    dropped: bool,
}

/// Runs the alignment path forward. Returns the aligned grid and the cache
/// for [`align_backward`].
pub fn align_forward<F: Scalar>(
    hidden: &FeatureGrid<F>,
    projector: &Projector<F>,
    cfg: &AlignPathConfig,
) -> Result<(FeatureGrid<F>, AlignPathCache<F>)> {
    let (proj, pcache) = projector.forward(hidden)?;
    let (work, dropped) = if cfg.drop_first_frame {
        (drop_first_latent_frame(&proj)?, true)
    } else {
        (proj, false)
    };
    let (f, h, w, _) = work.dim();
    let spec = ShapeSpec::new((f, h, w), cfg.target)?;
    let out = interpolate_to(&work, &spec)?;
    Ok((
        out,
        AlignPathCache {
            projector: pcache,
            interp_spec: spec,
            dropped,
        },
    ))
}

/// Pulls a gradient on the aligned grid back to the hidden grid, accumulating
/// projector parameter grads along the way.
pub fn align_backward<F: Scalar>(
    dout: &FeatureGrid<F>,
    projector: &mut Projector<F>,
    cache: &AlignPathCache<F>,
) -> FeatureGrid<F> {
    let dwork = interpolate_to_backward(dout, &cache.interp_spec);
    let dproj = if cache.dropped {
        drop_first_latent_frame_backward(&dwork)
    } else {
        dwork
    };
    projector.backward(&cache.projector, &dproj)
}
