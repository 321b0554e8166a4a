use ndarray::{Array2, Array3, Array4, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Token features on a (temporal `f`, spatial `h`×`w`, channel `d`) grid.
///
/// The common currency of encoder outputs and projected diffusion hidden
/// states.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<F: Scalar> {
    data: Array4<F>,
}

impl<F: Scalar> FeatureGrid<F> {
    /// Wraps a tensor with axes (f, h, w, d). All entries must be finite.
    pub fn new(data: Array4<F>) -> Result<Self> {
        let (f, h, w, d) = data.dim();
        if f == 0 || h == 0 || w == 0 || d == 0 {
            return Err(Error::InvalidShape(format!(
                "feature grid dims must be >= 1, got ({f},{h},{w},{d})"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("feature grid contains NaN/Inf".into()));
        }
        Ok(Self { data })
    }

    /// Like [`new`](Self::new) but skips the finiteness scan. For internal
    /// paths that already guarantee finite values.
    pub(crate) fn from_raw(data: Array4<F>) -> Self {
        Self { data }
    }

    pub fn data(&self) -> &Array4<F> {
        &self.data
    }

    pub fn into_data(self) -> Array4<F> {
        self.data
    }

    /// (f, h, w, d)
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial_tokens(&self) -> usize {
        let (_, h, w, _) = self.data.dim();
        h * w
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    /// Same data viewed as (f, h*w, d) token matrix per frame.
    pub fn tokens(&self) -> Array3<F> {
        let (f, h, w, d) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((f, h * w, d))
            .expect("contiguous")
            .to_owned()
    }

    /// Rebuilds a grid from (f, h*w, d) tokens and an explicit (h, w) split.
    pub fn from_tokens(tokens: Array3<F>, h: usize, w: usize) -> Result<Self> {
        let (f, hw, d) = tokens.dim();
        if h * w != hw {
            return Err(Error::InvalidShape(format!(
                "h*w = {} does not match token count {hw}",
                h * w
            )));
        }
        let data = tokens
            .into_shape_with_order((f, h, w, d))
            .map_err(|e| Error::InvalidShape(e.to_string()))?;
        Ok(Self { data })
    }

    /// All tokens flattened to (f*h*w, d).
    pub fn flat_tokens(&self) -> Array2<F> {
        let (f, h, w, d) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((f * h * w, d))
            .expect("contiguous")
            .to_owned()
    }
}

/// A raw video clip: (frames, channels, height, width), pixel values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Array4<f32>,
}

impl VideoTensor {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("video contains NaN/Inf".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    /// (frames, channels, height, width)
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f32> {
        // single-channel callers use channel 0
        self.data.slice(ndarray::s![t, 0, .., ..])
    }
}
