//! Pairwise token relations and the loss terms built on them.
//!
//! Spatial relations are per-frame token-pair cosine similarity matrices;
//! temporal relations are cross-frame token-pair similarities. The
//! distillation loss is the mean L1 distance between the relation tensors of
//! two feature grids, with an optional elementwise margin deadzone. Analytic
//! gradients are provided alongside each loss so the training loop can stay
//! free of any autodiff machinery.

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::scalar::{c, Scalar};

/// Weights and knobs for the combined training objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the relational term in the combined loss.
    pub lambda: f64,
    /// Elementwise deadzone: absolute relation differences strictly below
    /// this value contribute zero.
    pub margin: f64,
    /// 1-based transformer layer whose hidden state is tapped for alignment.
    pub align_depth: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            margin: 0.1,
            align_depth: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=2.0).contains(&self.margin) {
            return Err(Error::InvalidInput(format!(
                "margin must be in [0, 2], got {}",
                self.margin
            )));
        }
        if self.align_depth < 1 || self.align_depth > num_layers {
            return Err(Error::InvalidInput(format!(
                "align_depth must be in [1, {num_layers}], got {}",
                self.align_depth
            )));
        }
        Ok(())
    }
}

/// Spatial (f, hw, hw) and temporal (f, hw, hw, f-1) cosine-similarity
/// tensors of one feature grid.
#[derive(Debug, Clone)]
pub struct RelationSet<F: Scalar> {
    pub spatial: Array3<F>,
    pub temporal: Array4<F>,
}

/// L2-normalizes every token vector; zero vectors stay zero.
pub fn normalize_tokens<F: Scalar>(grid: &FeatureGrid<F>) -> FeatureGrid<F> {
    let mut data = grid.data().clone();
    let eps = c::<F>(F::EPS_NORM);
    for mut token in data.rows_mut() {
        let norm = token.iter().map(|v| *v * *v).sum::<F>().sqrt();
        if norm > F::zero() {
            let inv = F::one() / (norm + eps);
            token.mapv_inplace(|v| v * inv);
        }
    }
    FeatureGrid::from_raw(data)
}

/// Per-frame token-pair cosine similarity matrix, shape (f, hw, hw).
pub fn spatial_relations<F: Scalar>(grid: &FeatureGrid<F>) -> Array3<F> {
    let normed = normalize_tokens(grid);
    let tokens = normed.tokens();
    let (f, hw, _) = tokens.dim();
    let mut out = Array3::zeros((f, hw, hw));
    for d in 0..f {
        let x = tokens.index_axis(Axis(0), d);
        out.index_axis_mut(Axis(0), d).assign(&x.dot(&x.t()));
    }
    out
}

/// Index of frame `e` within the other-frame axis for anchor frame `d`:
/// ascending frame order with `d` skipped.
#[inline]
pub fn other_frame_slot(d: usize, e: usize) -> usize {
    debug_assert_ne!(d, e);
    if e < d {
        e
    } else {
        e - 1
    }
}

/// Cross-frame token-pair cosine similarities, shape (f, hw, hw, f-1).
///
/// Entry (d, i, j, k) relates token i of frame d with token j of the k-th
/// other frame, other frames enumerated in ascending index skipping d.
pub fn temporal_relations<F: Scalar>(grid: &FeatureGrid<F>) -> Result<Array4<F>> {
    let (f, _, _, _) = grid.dim();
    if f < 2 {
        return Err(Error::InvalidShape(
            "temporal relations need f >= 2 frames".into(),
        ));
    }
    let normed = normalize_tokens(grid);
    let tokens = normed.tokens();
    let hw = tokens.dim().1;
    let mut out = Array4::zeros((f, hw, hw, f - 1));
    for d in 0..f {
        let xd = tokens.index_axis(Axis(0), d);
        for e in 0..f {
            if e == d {
                continue;
            }
            let xe = tokens.index_axis(Axis(0), e);
            let sim = xd.dot(&xe.t());
            out.slice_mut(s![d, .., .., other_frame_slot(d, e)])
                .assign(&sim);
        }
    }
    Ok(out)
}

/// Both relation tensors of one grid.
pub fn relation_set<F: Scalar>(grid: &FeatureGrid<F>) -> Result<RelationSet<F>> {
    Ok(RelationSet {
        spatial: spatial_relations(grid),
        temporal: temporal_relations(grid)?,
    })
}

fn check_fhw_match<F: Scalar>(a: &FeatureGrid<F>, b: &FeatureGrid<F>) -> Result<()> {
    let (fa, ha, wa, _) = a.dim();
    let (fb, hb, wb, _) = b.dim();
    if (fa, ha, wa) != (fb, hb, wb) {
        return Err(Error::InvalidShape(format!(
            "grid (f,h,w) mismatch: ({fa},{ha},{wa}) vs ({fb},{hb},{wb})"
        )));
    }
    Ok(())
}

/// Relational distillation loss: mean L1 distance between the spatial
/// relation tensors plus mean L1 distance between the temporal ones, with
/// absolute differences strictly below `margin` zeroed. Denominators count
/// all pairs, zeroed entries included.
pub fn trd_loss<F: Scalar>(
    h_grid: &FeatureGrid<F>,
    y_grid: &FeatureGrid<F>,
    margin: f64,
) -> Result<F> {
    check_fhw_match(h_grid, y_grid)?;
    let h_rel = relation_set(h_grid)?;
    let y_rel = relation_set(y_grid)?;
    Ok(trd_from_relations(&h_rel, &y_rel, margin))
}

/// Loss given precomputed relation tensors.
pub fn trd_from_relations<F: Scalar>(
    h_rel: &RelationSet<F>,
    y_rel: &RelationSet<F>,
    margin: f64,
) -> F {
    let m = c::<F>(margin);
    let deadzone = |d: F| if d < m { F::zero() } else { d };
    let spatial_sum: F = h_rel
        .spatial
        .iter()
        .zip(y_rel.spatial.iter())
        .map(|(h, y)| deadzone((*h - *y).abs()))
        .sum();
    let temporal_sum: F = h_rel
        .temporal
        .iter()
        .zip(y_rel.temporal.iter())
        .map(|(h, y)| deadzone((*h - *y).abs()))
        .sum();
    spatial_sum / c(h_rel.spatial.len() as f64) + temporal_sum / c(h_rel.temporal.len() as f64)
}

/// Negative mean token-wise cosine similarity between corresponding tokens.
pub fn repa_loss<F: Scalar>(y_star: &FeatureGrid<F>, h_proj: &FeatureGrid<F>) -> Result<F> {
    if y_star.dim() != h_proj.dim() {
        return Err(Error::InvalidShape(format!(
            "repa loss needs identical shapes, got {:?} vs {:?}",
            y_star.dim(),
            h_proj.dim()
        )));
    }
    let yn = normalize_tokens(y_star);
    let hn = normalize_tokens(h_proj);
    let n = yn.data().len() / yn.channels();
    let dot: F = yn
        .data()
        .iter()
        .zip(hn.data().iter())
        .map(|(a, b)| *a * *b)
        .sum();
    Ok(-dot / c(n as f64))
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss<F: Scalar>(eps_pred: &ArrayD<F>, eps: &ArrayD<F>) -> Result<F> {
    if eps_pred.shape() != eps.shape() {
        return Err(Error::InvalidShape(format!(
            "noise shape mismatch: {:?} vs {:?}",
            eps_pred.shape(),
            eps.shape()
        )));
    }
    let sum: F = eps_pred
        .iter()
        .zip(eps.iter())
        .map(|(a, b)| (*a - *b) * (*a - *b))
        .sum();
    Ok(sum / c(eps.len() as f64))
}

/// `l_diff + lambda * l_trd`.
pub fn combined_loss<F: Scalar>(l_diff: F, l_trd: F, cfg: &LossConfig) -> Result<F> {
    if l_diff < F::zero() || l_trd < F::zero() {
        return Err(Error::InvalidInput(format!(
            "loss terms must be >= 0, got l_diff={:?} l_trd={:?}",
            l_diff.to_f64(),
            l_trd.to_f64()
        )));
    }
    Ok(l_diff + c::<F>(cfg.lambda) * l_trd)
}

// ---------------------------------------------------------------------------
// Analytic gradients
// ---------------------------------------------------------------------------

/// Normalized tokens (f, hw, d) plus the raw per-token norms, cached for the
/// backward passes below.
struct NormCache<F: Scalar> {
    unit: Array3<F>,
    norms: Array2<F>,
}

fn normalize_with_cache<F: Scalar>(grid: &FeatureGrid<F>) -> NormCache<F> {
    let tokens = grid.tokens();
    let (f, hw, dch) = tokens.dim();
    let mut unit = Array3::zeros((f, hw, dch));
    let mut norms = Array2::zeros((f, hw));
    let eps = c::<F>(F::EPS_NORM);
    for d in 0..f {
        for i in 0..hw {
            let t = tokens.slice(s![d, i, ..]);
            let norm = t.iter().map(|v| *v * *v).sum::<F>().sqrt();
            norms[[d, i]] = norm;
            if norm > F::zero() {
                let inv = F::one() / (norm + eps);
                unit.slice_mut(s![d, i, ..]).assign(&t.mapv(|v| v * inv));
            }
        }
    }
    NormCache { unit, norms }
}

/// Pulls a gradient w.r.t. unit tokens back through L2 normalization.
///
/// With u = x / (|x| + eps): dx = du/(|x|+eps) - x (x . du) / (|x| (|x|+eps)^2).
fn backprop_normalization<F: Scalar>(cache: &NormCache<F>, grad_unit: &Array3<F>) -> Array3<F> {
    let (f, hw, dch) = cache.unit.dim();
    let eps = c::<F>(F::EPS_NORM);
    let mut grad = Array3::zeros((f, hw, dch));
    for d in 0..f {
        for i in 0..hw {
            let n = cache.norms[[d, i]];
            if n <= F::zero() {
                continue; // zero token: convention u = 0, subgradient 0
            }
            let u = cache.unit.slice(s![d, i, ..]);
            let du = grad_unit.slice(s![d, i, ..]);
            let scale = F::one() / (n + eps);
            // x = u * (n + eps), so x.du = (n + eps) * (u.du)
            let udu: F = u.iter().zip(du.iter()).map(|(a, b)| *a * *b).sum();
            let corr = udu * (n + eps) * scale / n;
            let mut g = grad.slice_mut(s![d, i, ..]);
            for k in 0..dch {
                g[k] = du[k] * scale - u[k] * corr;
            }
        }
    }
    grad
}

/// Value and gradient of [`trd_loss`] w.r.t. `h_grid`.
pub fn trd_loss_grad<F: Scalar>(
    h_grid: &FeatureGrid<F>,
    y_grid: &FeatureGrid<F>,
    margin: f64,
) -> Result<(F, FeatureGrid<F>)> {
    check_fhw_match(h_grid, y_grid)?;
    let (f, h, w, dch) = h_grid.dim();
    if f < 2 {
        return Err(Error::InvalidShape(
            "relational loss needs f >= 2 frames".into(),
        ));
    }
    let hw = h * w;
    let m = c::<F>(margin);

    let h_cache = normalize_with_cache(h_grid);
    let y_cache = normalize_with_cache(y_grid);

    let spatial_denom = c::<F>((f * hw * hw) as f64);
    let temporal_denom = c::<F>((f * hw * hw * (f - 1)) as f64);

    let mut loss = F::zero();
    // Gradient w.r.t. the normalized h tokens; dL/ds flows to both operands
    // of each dot product.
    let mut grad_unit = Array3::<F>::zeros((f, hw, dch));

    // Spatial term: s[d,i,j] = hu[d,i] . hu[d,j]
    for d in 0..f {
        let hu = h_cache.unit.index_axis(Axis(0), d);
        let yu = y_cache.unit.index_axis(Axis(0), d);
        let hs = hu.dot(&hu.t());
        let ys = yu.dot(&yu.t());
        // dL/ds, margin deadzone applied (strict <, subgradient 0 inside)
        let mut coeff = Array2::<F>::zeros((hw, hw));
        for i in 0..hw {
            for j in 0..hw {
                let diff = hs[[i, j]] - ys[[i, j]];
                let ad = diff.abs();
                if ad >= m && ad > F::zero() {
                    loss = loss + ad / spatial_denom;
                    coeff[[i, j]] = diff.signum() / spatial_denom;
                }
            }
        }
        // s = U U^T  =>  dU = (C + C^T) U
        let sym = &coeff + &coeff.t();
        let gu = sym.dot(&hu);
        grad_unit.index_axis_mut(Axis(0), d).scaled_add(F::one(), &gu);
    }

    // Temporal term: s[d,i,j,e] = hu[d,i] . hu[e,j] over e != d
    for d in 0..f {
        let hud = h_cache.unit.index_axis(Axis(0), d);
        let yud = y_cache.unit.index_axis(Axis(0), d);
        for e in 0..f {
            if e == d {
                continue;
            }
            let hue = h_cache.unit.index_axis(Axis(0), e);
            let yue = y_cache.unit.index_axis(Axis(0), e);
            let hs = hud.dot(&hue.t());
            let ys = yud.dot(&yue.t());
            let mut coeff = Array2::<F>::zeros((hw, hw));
            for i in 0..hw {
                for j in 0..hw {
                    let diff = hs[[i, j]] - ys[[i, j]];
                    let ad = diff.abs();
                    if ad >= m && ad > F::zero() {
                        loss = loss + ad / temporal_denom;
                        coeff[[i, j]] = diff.signum() / temporal_denom;
                    }
                }
            }
            // s = A B^T  =>  dA = C B, dB = C^T A
            let ga = coeff.dot(&hue);
            let gb = coeff.t().dot(&hud);
            grad_unit.index_axis_mut(Axis(0), d).scaled_add(F::one(), &ga);
            grad_unit.index_axis_mut(Axis(0), e).scaled_add(F::one(), &gb);
        }
    }

    let grad_tokens = backprop_normalization(&h_cache, &grad_unit);
    let grad = FeatureGrid::from_tokens(grad_tokens, h, w)?;
    Ok((loss, grad))
}

/// Value and gradient of [`repa_loss`] w.r.t. `h_proj`.
pub fn repa_loss_grad<F: Scalar>(
    y_star: &FeatureGrid<F>,
    h_proj: &FeatureGrid<F>,
) -> Result<(F, FeatureGrid<F>)> {
    if y_star.dim() != h_proj.dim() {
        return Err(Error::InvalidShape(format!(
            "repa loss needs identical shapes, got {:?} vs {:?}",
            y_star.dim(),
            h_proj.dim()
        )));
    }
    let (f, h, w, dch) = h_proj.dim();
    let hw = h * w;
    let n = c::<F>((f * hw) as f64);

    let h_cache = normalize_with_cache(h_proj);
    let y_cache = normalize_with_cache(y_star);

    let mut loss = F::zero();
    let mut grad_unit = Array3::<F>::zeros((f, hw, dch));
    for d in 0..f {
        for i in 0..hw {
            let hu = h_cache.unit.slice(s![d, i, ..]);
            let yu = y_cache.unit.slice(s![d, i, ..]);
            let cos: F = hu.iter().zip(yu.iter()).map(|(a, b)| *a * *b).sum();
            loss = loss - cos / n;
            let mut g = grad_unit.slice_mut(s![d, i, ..]);
            for k in 0..dch {
                g[k] = -yu[k] / n;
            }
        }
    }
    let grad_tokens = backprop_normalization(&h_cache, &grad_unit);
    let grad = FeatureGrid::from_tokens(grad_tokens, h, w)?;
    Ok((loss, grad))
}

/// Value and gradient of [`diffusion_loss`] w.r.t. `eps_pred`.
pub fn diffusion_loss_grad<F: Scalar>(
    eps_pred: &ArrayD<F>,
    eps: &ArrayD<F>,
) -> Result<(F, ArrayD<F>)> {
    let loss = diffusion_loss(eps_pred, eps)?;
    let scale = c::<F>(2.0 / eps.len() as f64);
    let grad = (eps_pred - eps).mapv(|v| v * scale);
    Ok((loss, grad))
}
