//! Small convolutional feature extractor and linear classifier heads.
//!
//! Activations are kept as row-major matrices. A convolutional activation of
//! a batch with `B` images of `H x W` pixels and `C` channels is stored as a
//! `(B * H * W, C)` matrix whose row index is `(b * H + y) * W + x`, which is
//! also the memory layout of an `H x W x C` image flattened row by row. A
//! batch of images is therefore a `(B, H * W * C)` matrix and the reshape
//! between the two views is free.
//!
//! Every layer caches what its backward pass needs. Backward passes compute
//! parameter gradients only when a gradient accumulator is supplied, so an
//! attack that only needs input gradients skips the weight products.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height, width and channel count of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    /// Number of scalar values in one image.
    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Architecture of the convolutional extractor.
///
/// Each entry of `conv_channels` adds a 3x3 same-padded convolution, a ReLU
/// and a 2x2 max-pool. A fully connected ReLU layer maps the flattened last
/// activation to `feature_dim` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input: ImageShape,
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() {
            return Err(Error::config("input shape has a zero dimension"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.len() > 4 {
            return Err(Error::config(format!(
                "backbone needs 1 to 4 conv blocks, got {}",
                self.conv_channels.len()
            )));
        }
        if self.conv_channels.contains(&0) || self.feature_dim == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        let (mut h, mut w) = (self.input.height, self.input.width);
        for _ in &self.conv_channels {
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(Error::config(format!(
                    "input {}x{} is too small for {} pooling stages",
                    self.input.height,
                    self.input.width,
                    self.conv_channels.len()
                )));
            }
        }
        Ok(())
    }

    /// Spatial size entering each conv block, plus the final pooled size.
    fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![(self.input.height, self.input.width)];
        let (mut h, mut w) = (self.input.height, self.input.width);
        for _ in &self.conv_channels {
            h /= 2;
            w /= 2;
            sizes.push((h, w));
        }
        sizes
    }

    fn flat_dim(&self) -> usize {
        let (h, w) = *self.spatial_sizes().last().unwrap();
        h * w * self.conv_channels.last().copied().unwrap_or(self.input.channels)
    }
}

/// Weight matrix plus bias: `y = x . weight + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn he_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        Self { weight, bias: Array1::zeros(fan_out) }
    }

    fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates `dW += x^T dy` and `db += sum(dy)`.
    fn accumulate(&mut self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut self.weight);
        self.bias += &dy.sum_axis(Axis(0));
    }
}

/// The shared feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    config: BackboneConfig,
    convs: Vec<Affine>,
    fc: Affine,
}

struct ConvCache {
    cols: Array2<f64>,
    /// Post-ReLU conv output, `(B*H*W, C_out)`.
    activated: Array2<f64>,
    /// For each pooled element, the flat index of the winning input element.
    argmax: Vec<usize>,
    height: usize,
    width: usize,
    in_channels: usize,
}

/// Everything the backward pass of [`Backbone`] needs.
pub struct ForwardCache {
    batch: usize,
    convs: Vec<ConvCache>,
    fc_input: Array2<f64>,
    features: Array2<f64>,
}

impl ForwardCache {
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn into_features(self) -> Array2<f64> {
        self.features
    }
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.conv_channels.len());
        let mut in_c = config.input.channels;
        for &out_c in &config.conv_channels {
            convs.push(Affine::he_uniform(9 * in_c, out_c, rng));
            in_c = out_c;
        }
        let fc = Affine::he_uniform(config.flat_dim(), config.feature_dim, rng);
        Ok(Self { config, convs, fc })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn input_shape(&self) -> ImageShape {
        self.config.input
    }

    /// All-zero parameters with the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            convs: self.convs.iter().map(Affine::zeros_like).collect(),
            fc: self.fc.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for layer in self.convs.iter().chain(std::iter::once(&self.fc)) {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for layer in self.convs.iter_mut().chain(std::iter::once(&mut self.fc)) {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn check_input(&self, images: &ArrayView2<f64>) -> Result<()> {
        let expected = self.config.input.len();
        if images.ncols() != expected {
            return Err(Error::config(format!(
                "image has {} values but the extractor expects {} ({}x{}x{})",
                images.ncols(),
                expected,
                self.config.input.height,
                self.config.input.width,
                self.config.input.channels
            )));
        }
        Ok(())
    }

    /// Features for a `(B, H*W*C)` batch, without keeping a cache.
    pub fn features(&self, images: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(images)?.into_features())
    }

    pub fn forward(&self, images: &ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(images)?;
        let batch = images.nrows();
        let sizes = self.config.spatial_sizes();
        let mut act = images
            .to_owned()
            .into_shape_with_order((batch * self.config.input.height * self.config.input.width, self.config.input.channels))
            .expect("contiguous batch");
        let mut caches = Vec::with_capacity(self.convs.len());
        for (layer, &(h, w)) in self.convs.iter().zip(&sizes) {
            let in_channels = act.ncols();
            let cols = im2col(&act.view(), batch, h, w);
            let mut activated = layer.apply(&cols.view());
            activated.mapv_inplace(|v| v.max(0.0));
            let (pooled, argmax) = max_pool(&activated.view(), batch, h, w);
            caches.push(ConvCache { cols, activated, argmax, height: h, width: w, in_channels });
            act = pooled;
        }
        let flat = act.ncols() * act.nrows() / batch.max(1);
        let fc_input = act.into_shape_with_order((batch, flat)).expect("contiguous activation");
        let mut features = self.fc.apply(&fc_input.view());
        features.mapv_inplace(|v| v.max(0.0));
        Ok(ForwardCache { batch, convs: caches, fc_input, features })
    }

    /// Backpropagates `d_features` through the extractor.
    ///
    /// Parameter gradients are added into `grads` when given. The input
    /// gradient, shaped like the image batch, is returned when `need_input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_features: &ArrayView2<f64>,
        mut grads: Option<&mut Backbone>,
        need_input: bool,
    ) -> Option<Array2<f64>> {
        let batch = cache.batch;
        let mut d = d_features.to_owned();
        d.zip_mut_with(&cache.features, |g, &f| {
            if f <= 0.0 {
                *g = 0.0;
            }
        });
        if let Some(g) = grads.as_deref_mut() {
            g.fc.accumulate(&cache.fc_input.view(), &d.view());
        }
        let d_flat = d.dot(&self.fc.weight.t());
        let last_channels = self.convs.last().map(|c| c.weight.ncols()).unwrap();
        let mut d_act = d_flat
            .into_shape_with_order((cache.fc_input.len() / last_channels, last_channels))
            .expect("contiguous gradient");

        for (idx, (layer, c)) in self.convs.iter().zip(&cache.convs).enumerate().rev() {
            let mut d_conv = Array2::<f64>::zeros(c.activated.raw_dim());
            {
                let dst = d_conv.as_slice_mut().unwrap();
                let src = d_act.as_slice().unwrap();
                let act = c.activated.as_slice().unwrap();
                for (&from, &g) in c.argmax.iter().zip(src) {
                    if act[from] > 0.0 {
                        dst[from] += g;
                    }
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                g.convs[idx].accumulate(&c.cols.view(), &d_conv.view());
            }
            if idx == 0 && !need_input {
                return None;
            }
            let d_cols = d_conv.dot(&layer.weight.t());
            d_act = col2im(&d_cols.view(), batch, c.height, c.width, c.in_channels);
        }
        let len = self.config.input.len();
        Some(d_act.into_shape_with_order((batch, len)).expect("contiguous input gradient"))
    }
}

/// Expands each pixel into its zero-padded 3x3 neighbourhood.
///
/// Column `(ky * 3 + kx) * C + c` holds channel `c` at offset `(ky-1, kx-1)`.
fn im2col(act: &ArrayView2<f64>, batch: usize, h: usize, w: usize) -> Array2<f64> {
    let c = act.ncols();
    let mut cols = Array2::<f64>::zeros((batch * h * w, 9 * c));
    let src = act.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().unwrap();
    let row_len = 9 * c;
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let row = (b * h + y) * w + x;
                let out = &mut dst[row * row_len..(row + 1) * row_len];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src_row = (b * h + sy as usize) * w + sx as usize;
                        let k = ky * 3 + kx;
                        out[k * c..(k + 1) * c].copy_from_slice(&src[src_row * c..(src_row + 1) * c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(d_cols: &ArrayView2<f64>, batch: usize, h: usize, w: usize, c: usize) -> Array2<f64> {
    let mut d = Array2::<f64>::zeros((batch * h * w, c));
    let src = d_cols.as_slice().expect("standard layout");
    let dst = d.as_slice_mut().unwrap();
    let row_len = 9 * c;
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let row = (b * h + y) * w + x;
                let input = &src[row * row_len..(row + 1) * row_len];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst_row = (b * h + sy as usize) * w + sx as usize;
                        let k = ky * 3 + kx;
                        for (o, &g) in dst[dst_row * c..(dst_row + 1) * c].iter_mut().zip(&input[k * c..(k + 1) * c]) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    d
}

/// 2x2 max-pool with stride 2; odd trailing rows and columns are dropped.
fn max_pool(act: &ArrayView2<f64>, batch: usize, h: usize, w: usize) -> (Array2<f64>, Vec<usize>) {
    let c = act.ncols();
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Array2::<f64>::zeros((batch * ph * pw, c));
    let mut argmax = vec![0usize; batch * ph * pw * c];
    let src = act.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().unwrap();
    for b in 0..batch {
        for py in 0..ph {
            for px in 0..pw {
                let orow = (b * ph + py) * pw + px;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let irow = (b * h + 2 * py + dy) * w + 2 * px + dx;
                            let i = irow * c + ch;
                            if src[i] > best {
                                best = src[i];
                                best_idx = i;
                            }
                        }
                    }
                    dst[orow * c + ch] = best;
                    argmax[orow * c + ch] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

/// Linear classifier over features. Row `k` of `weight` scores class `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl LinearHead {
    pub fn empty(feature_dim: usize) -> Self {
        Self { weight: Array2::zeros((0, feature_dim)), bias: Array1::zeros(0) }
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::config("head weight rows and bias length differ"));
        }
        Ok(Self { weight: weight.as_standard_layout().into_owned(), bias })
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    /// Appends `extra` output rows: zero bias and weights drawn from
    /// `U(-1/sqrt(d), 1/sqrt(d))`. Existing rows are left untouched.
    pub fn grow<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) {
        let d = self.feature_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let new_rows = Array2::from_shape_fn((extra, d), |_| rng.random_range(-bound..bound));
        self.weight = ndarray::concatenate(Axis(0), &[self.weight.view(), new_rows.view()]).expect("same width");
        self.bias = ndarray::concatenate(Axis(0), &[self.bias.view(), Array1::zeros(extra).view()]).expect("1-d");
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.len()) }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice().expect("standard layout"), self.bias.as_slice().expect("standard layout")]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn forward(&self, features: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.feature_dim() {
            return Err(Error::config(format!(
                "features have dimension {} but the head expects {}",
                features.ncols(),
                self.feature_dim()
            )));
        }
        let mut logits = features.dot(&self.weight.t());
        logits += &self.bias;
        Ok(logits)
    }

    /// Returns `d_features`; adds parameter gradients into `grads` if given.
    /// `d_logits` may cover only the leading classes of the head.
    pub fn backward(
        &self,
        features: &ArrayView2<f64>,
        d_logits: &ArrayView2<f64>,
        grads: Option<&mut LinearHead>,
    ) -> Array2<f64> {
        let k = d_logits.ncols();
        let w = self.weight.slice(ndarray::s![..k, ..]);
        if let Some(g) = grads {
            let mut gw = g.weight.slice_mut(ndarray::s![..k, ..]);
            ndarray::linalg::general_mat_mul(1.0, &d_logits.t(), features, 1.0, &mut gw);
            let mut gb = g.bias.slice_mut(ndarray::s![..k]);
            gb += &d_logits.sum_axis(Axis(0));
        }
        d_logits.dot(&w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Backbone, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = BackboneConfig { input: ImageShape::new(6, 6, 2), conv_channels: vec![3, 4], feature_dim: 5 };
        (Backbone::new(cfg, &mut rng).unwrap(), rng)
    }

    fn objective(net: &Backbone, x: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        (net.features(&x.view()).unwrap() * probe).sum()
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (net, mut rng) = tiny();
        let x = Array2::from_shape_fn((2, 72), |_| rng.random_range(0.0..1.0));
        let probe = Array2::from_shape_fn((2, 5), |_| rng.random_range(-1.0..1.0));
        let cache = net.forward(&x.view()).unwrap();
        let dx = net.backward(&cache, &probe.view(), None, true).unwrap();
        let h = 1e-6;
        for idx in [0usize, 7, 35, 71, 100, 143] {
            let (r, c) = (idx / 72, idx % 72);
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let fd = (objective(&net, &xp, &probe) - objective(&net, &xm, &probe)) / (2.0 * h);
            assert!((fd - dx[[r, c]]).abs() < 1e-6 * (1.0 + fd.abs()), "idx {idx}: fd {fd} vs {}", dx[[r, c]]);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let (net, mut rng) = tiny();
        let x = Array2::from_shape_fn((3, 72), |_| rng.random_range(0.0..1.0));
        let probe = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let cache = net.forward(&x.view()).unwrap();
        let mut grads = net.zeros_like();
        net.backward(&cache, &probe.view(), Some(&mut grads), false);
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let h = 1e-6;
        for (t, values) in analytic.iter().enumerate() {
            for i in (0..values.len()).step_by(values.len() / 4 + 1) {
                let mut plus = net.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = net.clone();
                minus.tensors_mut()[t][i] -= h;
                let fd = (objective(&plus, &x, &probe) - objective(&minus, &x, &probe)) / (2.0 * h);
                assert!((fd - values[i]).abs() < 1e-6 * (1.0 + fd.abs()), "tensor {t}[{i}]: fd {fd} vs {}", values[i]);
            }
        }
    }

    #[test]
    fn head_growth_preserves_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = LinearHead::empty(4);
        head.grow(2, &mut rng);
        let before = head.weight().clone();
        head.grow(3, &mut rng);
        assert_eq!(head.classes(), 5);
        assert_eq!(head.weight().slice(ndarray::s![..2, ..]), before);
        assert!(head.bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_wrong_image_size() {
        let (net, _) = tiny();
        let x = Array2::<f64>::zeros((1, 10));
        assert!(matches!(net.forward(&x.view()), Err(Error::Config(_))));
    }

    #[test]
    fn too_many_pools_is_a_config_error() {
        let cfg = BackboneConfig { input: ImageShape::new(4, 4, 1), conv_channels: vec![2, 2, 2], feature_dim: 3 };
        assert!(cfg.validate().is_err());
    }
}
