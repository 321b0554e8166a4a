//! Linear probe for physics understanding: does a frozen feature space
//! linearly separate clips where the queried ball pair goes on to touch from
//! clips where it does not?

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::dataset::{clip_path, load_clip, Manifest, SampleRecord, Split};
use crate::dit::ToyDiT;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;
use crate::latent::Latentizer;
use crate::schedule::NoiseSchedule;
use crate::vfm::ToyVFM;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeConfig {
    /// Diffusion timestep at which transformer features are read (the clip
    /// is lightly noised, matching how the model sees data in training).
    pub t_probe: usize,
    /// Number of temporal slices pooled into the feature vector.
    pub temporal_samples: usize,
    pub ridge: f64,
    pub max_epochs: usize,
    /// Seed mixed into each clip's probe-noise seed.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            t_probe: crate::schedule::DEFAULT_TIMESTEPS / 20,
            temporal_samples: 3,
            ridge: 1e-3,
            max_epochs: 5000,
            seed: 0,
        }
    }
}

/// Evenly spaced temporal indices over `frames`, endpoints included:
/// index_i = floor(i * (frames - 1) / (count - 1)).
pub fn temporal_indices(frames: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || frames == 0 {
        return Err(Error::InvalidInput("frames and count must be > 0".into()));
    }
    if count > frames {
        return Err(Error::InvalidInput(format!(
            "cannot draw {count} distinct temporal slices from {frames} frames"
        )));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    Ok((0..count).map(|i| i * (frames - 1) / (count - 1)).collect())
}

/// Where probe features come from.
pub enum FeatureSource<'a> {
    /// Hidden state of the diffusion transformer after 1-based layer `layer`,
    /// read on the lightly noised latent.
    Dit {
        dit: &'a ToyDiT<f32>,
        latentizer: &'a Latentizer,
        schedule: &'a NoiseSchedule,
        layer: usize,
    },
    /// Output grid of the frozen video feature model.
    Vfm(&'a ToyVFM<f32>),
}

impl FeatureSource<'_> {
    pub fn label(&self) -> String {
        match self {
            FeatureSource::Dit { layer, .. } => format!("dit-layer-{layer}"),
            FeatureSource::Vfm(_) => "vfm".into(),
        }
    }

    fn grid(&self, video: &Array4<f32>, noise_seed: u64, t_probe: usize) -> Result<FeatureGrid<f32>> {
        match self {
            FeatureSource::Dit {
                dit,
                latentizer,
                schedule,
                layer,
            } => {
                let vt = crate::grid::VideoTensor::new(video.clone())?;
                let z0 = latentizer.encode(&vt)?.into_dyn();
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                let eps = ndarray::ArrayD::from_shape_fn(z0.raw_dim(), |_| {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32
                });
                let zt = schedule
                    .add_noise(&z0, &eps, t_probe)?
                    .into_dimensionality::<ndarray::Ix4>()
                    .map_err(|e| Error::InvalidShape(e.to_string()))?;
                let (_, mut hiddens, _) = dit.forward_to(&zt, t_probe, *layer)?;
                hiddens
                    .pop()
                    .ok_or_else(|| Error::InvalidInput("no hidden state produced".into()))
            }
            FeatureSource::Vfm(vfm) => vfm.forward(video),
        }
    }
}

fn clip_noise_seed(cfg_seed: u64, sample: &SampleRecord) -> u64 {
    // splitmix64 so every clip gets a fixed, decorrelated probe noise seed
    let mut z = cfg_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(sample.trajectory_id);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// One feature vector per clip: every spatial token of the selected temporal
/// slices, concatenated and flattened.
pub fn extract_features(
    root: &Path,
    manifest: &Manifest,
    split: Split,
    source: &FeatureSource<'_>,
    cfg: &ProbeConfig,
) -> Result<(Array2<f64>, Vec<bool>)> {
    let records: Vec<_> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(Error::InvalidInput(format!("split {split:?} is empty")));
    }
    let frames = manifest.config.frames_context;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in &records {
        let clip = load_clip(&clip_path(root, rec), frames)?;
        let grid = source.grid(
            clip.data(),
            clip_noise_seed(cfg.seed, rec),
            cfg.t_probe,
        )?;
        let (f, h, w, d) = grid.dim();
        let picks = temporal_indices(f, cfg.temporal_samples)?;
        let mut feat = Vec::with_capacity(picks.len() * h * w * d);
        let data = grid.data();
        for &fi in &picks {
            for y in 0..h {
                for x in 0..w {
                    for k in 0..d {
                        feat.push(data[[fi, y, x, k]] as f64);
                    }
                }
            }
        }
        rows.push(feat);
        labels.push(rec.label);
    }
    let d = rows[0].len();
    let mut x = Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    Ok((x, labels))
}

/// Feature standardization statistics fitted on the training split.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(ndarray::Axis(0)) / n;
        let mut var = Array1::zeros(x.ncols());
        for row in x.rows() {
            for j in 0..x.ncols() {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let std = var.mapv(|v: f64| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LogisticModel {
    pub w: Array1<f64>,
    pub bias: f64,
    pub epochs_used: usize,
    pub final_grad_norm: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn grad(
    x: &Array2<f64>,
    y: &[f64],
    w: &Array1<f64>,
    bias: f64,
    ridge: f64,
) -> (Array1<f64>, f64) {
    let n = x.nrows() as f64;
    let z = x.dot(w);
    let r = Array1::from_shape_fn(x.nrows(), |i| (sigmoid(z[i] + bias) - y[i]) / n);
    let mut gw = x.t().dot(&r);
    gw.scaled_add(ridge, w);
    let gb = r.sum();
    (gw, gb)
}

/// Ridge-regularized logistic regression by full-batch gradient descent,
/// run until the gradient norm drops below 1e-5 or `max_epochs` is hit.
/// The step size comes from the curvature bound lambda_max(X^T X) / (4n).
pub fn fit_logistic(
    x: &Array2<f64>,
    labels: &[bool],
    ridge: f64,
    max_epochs: usize,
) -> Result<LogisticModel> {
    if x.nrows() != labels.len() {
        return Err(Error::InvalidInput("feature/label count mismatch".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Training(
            "cannot fit a probe on a single-class split".into(),
        ));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let n = x.nrows() as f64;

    // power iteration for the largest eigenvalue of X^T X
    let mut v = Array1::from_elem(x.ncols(), 1.0 / (x.ncols() as f64).sqrt());
    let mut lmax = 1.0;
    for _ in 0..60 {
        let u = x.t().dot(&x.dot(&v));
        lmax = u.dot(&v);
        let norm = u.dot(&u).sqrt();
        if norm < 1e-30 {
            break;
        }
        v = u / norm;
    }
    let lipschitz = lmax.max(1e-12) / (4.0 * n) + ridge + 0.25; // +0.25 covers the bias direction
    let lr = 1.0 / lipschitz;

    let mut w = Array1::zeros(x.ncols());
    let mut bias = 0.0;
    let mut epochs_used = max_epochs;
    let mut gnorm = f64::INFINITY;
    for epoch in 0..max_epochs {
        let (gw, gb) = grad(x, &y, &w, bias, ridge);
        gnorm = (gw.dot(&gw) + gb * gb).sqrt();
        if gnorm < 1e-5 {
            epochs_used = epoch;
            break;
        }
        w.scaled_add(-lr, &gw);
        bias -= lr * gb;
    }
    Ok(LogisticModel {
        w,
        bias,
        epochs_used,
        final_grad_norm: gnorm,
    })
}

impl LogisticModel {
    pub fn predict(&self, x: &Array2<f64>) -> Vec<bool> {
        x.rows()
            .into_iter()
            .map(|row| row.dot(&self.w) + self.bias > 0.0)
            .collect()
    }
}

/// 95% Wilson score interval for a binomial proportion.
pub fn binomial_ci95(successes: usize, n: usize) -> (f64, f64) {
    assert!(n > 0);
    let z = 1.959963984540054f64;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeResult {
    pub source: String,
    pub layer: Option<usize>,
    pub accuracy: f64,
    pub accuracy_pos: f64,
    pub accuracy_neg: f64,
    pub feature_dim: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_test: usize,
    pub config_hash: String,
}

/// Fits the probe on the train split and reports test-split accuracy.
pub fn ocp_accuracy(
    root: &Path,
    manifest: &Manifest,
    source: &FeatureSource<'_>,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (x_train, y_train) = extract_features(root, manifest, Split::Train, source, cfg)?;
    let (x_test, y_test) = extract_features(root, manifest, Split::Test, source, cfg)?;
    let stats = Standardizer::fit(&x_train);
    let model = fit_logistic(
        &stats.apply(&x_train),
        &y_train,
        cfg.ridge,
        cfg.max_epochs,
    )?;
    let pred = model.predict(&stats.apply(&x_test));
    let n_test = y_test.len();
    let mut correct = 0usize;
    let (mut pos_ok, mut pos_n, mut neg_ok, mut neg_n) = (0usize, 0usize, 0usize, 0usize);
    for (p, &y) in pred.iter().zip(y_test.iter()) {
        if y {
            pos_n += 1;
        } else {
            neg_n += 1;
        }
        if *p == y {
            correct += 1;
            if y {
                pos_ok += 1;
            } else {
                neg_ok += 1;
            }
        }
    }
    let accuracy = correct as f64 / n_test as f64;
    let (ci_low, ci_high) = binomial_ci95(correct, n_test);
    Ok(ProbeResult {
        source: source.label(),
        layer: match source {
            FeatureSource::Dit { layer, .. } => Some(*layer),
            FeatureSource::Vfm(_) => None,
        },
        accuracy,
        accuracy_pos: if pos_n > 0 { pos_ok as f64 / pos_n as f64 } else { f64::NAN },
        accuracy_neg: if neg_n > 0 { neg_ok as f64 / neg_n as f64 } else { f64::NAN },
        feature_dim: x_train.ncols(),
        ci_low,
        ci_high,
        n_test,
        config_hash: crate::ckpt::config_hash(cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn temporal_index_oracle() {
        assert_eq!(temporal_indices(12, 3).unwrap(), vec![0, 5, 11]);
        assert_eq!(temporal_indices(4, 3).unwrap(), vec![0, 1, 3]);
        assert_eq!(temporal_indices(4, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(temporal_indices(7, 1).unwrap(), vec![0]);
        assert!(temporal_indices(2, 3).is_err());
        assert!(temporal_indices(0, 1).is_err());
    }

    fn synthetic(n: usize, d: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2 == 0;
            for j in 0..d {
                let base = if label { sep } else { -sep };
                let noise: f64 = StandardNormal.sample(&mut rng);
                x[[i, j]] = if j == 0 { base + noise } else { noise };
            }
            y.push(label);
        }
        (x, y)
    }

    /// Newton's method on the same objective, as an independent oracle.
    fn newton_fit(x: &Array2<f64>, labels: &[bool], ridge: f64) -> (Array1<f64>, f64) {
        let n = x.nrows();
        let d = x.ncols();
        // augmented design matrix with a trailing 1 for the bias
        let mut xa = Array2::zeros((n, d + 1));
        for i in 0..n {
            for j in 0..d {
                xa[[i, j]] = x[[i, j]];
            }
            xa[[i, d]] = 1.0;
        }
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let mut w = Array1::<f64>::zeros(d + 1);
        for _ in 0..50 {
            let mut g = Array1::<f64>::zeros(d + 1);
            let mut hess = Array2::<f64>::zeros((d + 1, d + 1));
            for i in 0..n {
                let z = xa.row(i).dot(&w);
                let p = sigmoid(z);
                let r = (p - y[i]) / n as f64;
                g.scaled_add(r, &xa.row(i));
                let s = p * (1.0 - p) / n as f64;
                for a in 0..d + 1 {
                    for b in 0..d + 1 {
                        hess[[a, b]] += s * xa[[i, a]] * xa[[i, b]];
                    }
                }
            }
            for j in 0..d {
                g[j] += ridge * w[j];
                hess[[j, j]] += ridge;
            }
            // solve hess * step = g by Gaussian elimination
            let step = solve(hess.clone(), g.clone());
            let delta: f64 = step.dot(&step).sqrt();
            w -= &step;
            if delta < 1e-12 {
                break;
            }
        }
        let bias = w[d];
        (w.slice(ndarray::s![..d]).to_owned(), bias)
    }

    fn solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
        let n = b.len();
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if a[[r, col]].abs() > a[[piv, col]].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for j in 0..n {
                    let tmp = a[[col, j]];
                    a[[col, j]] = a[[piv, j]];
                    a[[piv, j]] = tmp;
                }
                b.swap(col, piv);
            }
            let diag = a[[col, col]];
            for r in col + 1..n {
                let factor = a[[r, col]] / diag;
                for j in col..n {
                    a[[r, j]] -= factor * a[[col, j]];
                }
                b[r] -= factor * b[col];
            }
        }
        let mut x = Array1::zeros(n);
        for r in (0..n).rev() {
            let mut acc = b[r];
            for j in r + 1..n {
                acc -= a[[r, j]] * x[j];
            }
            x[r] = acc / a[[r, r]];
        }
        x
    }

    #[test]
    fn gradient_descent_matches_newton_oracle() {
        let (x, y) = synthetic(120, 4, 1.5, 3);
        let stats = Standardizer::fit(&x);
        let xs = stats.apply(&x);
        let gd = fit_logistic(&xs, &y, 1e-3, 200_000).unwrap();
        let (w_newton, b_newton) = newton_fit(&xs, &y, 1e-3);
        assert!(
            gd.final_grad_norm < 1e-5,
            "gd did not converge: {}",
            gd.final_grad_norm
        );
        // the 1e-5 gradient stopping rule bounds the weight error by
        // gnorm / ridge = 1e-2
        for j in 0..4 {
            assert!(
                (gd.w[j] - w_newton[j]).abs() < 1e-2,
                "w[{j}]: gd {} vs newton {}",
                gd.w[j],
                w_newton[j]
            );
        }
        assert!((gd.bias - b_newton).abs() < 1e-2);
    }

    #[test]
    fn separable_data_classified_correctly() {
        let (x, y) = synthetic(200, 6, 4.0, 7);
        let stats = Standardizer::fit(&x);
        let model = fit_logistic(&stats.apply(&x), &y, 1e-3, 50_000).unwrap();
        let pred = model.predict(&stats.apply(&x));
        let correct = pred.iter().zip(y.iter()).filter(|(p, y)| p == y).count();
        assert!(correct as f64 / y.len() as f64 > 0.95);
    }

    #[test]
    fn single_class_labels_rejected() {
        let (x, _) = synthetic(20, 3, 1.0, 1);
        let y = vec![true; 20];
        assert!(fit_logistic(&x, &y, 1e-3, 10).is_err());
    }

    #[test]
    fn wilson_interval_oracle() {
        // against hand-computed Wilson values: 80/100 -> (0.7112, 0.8666)
        let (lo, hi) = binomial_ci95(80, 100);
        assert!((lo - 0.7112).abs() < 5e-4, "lo {lo}");
        assert!((hi - 0.8666).abs() < 5e-4, "hi {hi}");
        // coin flip at n=100 stays wide of 0.5 by about 0.096 each side
        let (lo, hi) = binomial_ci95(50, 100);
        assert!((0.5 - lo) > 0.09 && (0.5 - lo) < 0.11);
        assert!((hi - 0.5) > 0.09 && (hi - 0.5) < 0.11);
    }

    #[test]
    fn standardizer_zero_variance_column_is_safe() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = Array2::zeros((10, 2));
        for i in 0..10 {
            x[[i, 0]] = 3.0; // constant column
            x[[i, 1]] = rng.gen_range(-1.0..1.0);
        }
        let stats = Standardizer::fit(&x);
        let xs = stats.apply(&x);
        assert!(xs.iter().all(|v| v.is_finite()));
        assert!(xs.column(0).iter().all(|&v| v == 0.0));
    }
}
