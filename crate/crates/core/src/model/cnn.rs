//! Small convolutional classifier with hand-written reverse mode.
//!
//! Each block is a 3x3 convolution (stride 1, zero padding 1) followed by a
//! ReLU, optionally followed by 2x2 average pooling. The post-ReLU block
//! outputs are the tap points. A linear head maps the (pooled) output of the
//! final block to logits.

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_input, Classifier, ForwardPass, GradTargets, Gradients, InputShape, LayerDesc, Mode};
use crate::error::{Error, Result};

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub channels: usize,
    /// Apply 2x2 average pooling after the activation.
    #[serde(default)]
    pub pool: bool,
}

/// Architecture descriptor, stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnArchitecture {
    pub input: InputShape,
    pub num_classes: usize,
    pub blocks: Vec<ConvBlock>,
    /// Block indices whose activations are tapped. Empty means every block.
    #[serde(default)]
    pub taps: Vec<usize>,
    /// Per-channel input standardization applied inside the model. Empty
    /// means identity.
    #[serde(default)]
    pub input_mean: Vec<f64>,
    #[serde(default)]
    pub input_std: Vec<f64>,
}

impl CnnArchitecture {
    /// Three-block network for the 8x8 single-channel toy images.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            input: InputShape::new(1, 8, 8),
            num_classes,
            blocks: vec![
                ConvBlock { channels: 4, pool: true },
                ConvBlock { channels: 8, pool: true },
                ConvBlock { channels: 8, pool: false },
            ],
            taps: Vec::new(),
            input_mean: Vec::new(),
            input_std: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("architecture needs at least one conv block"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.input.numel() == 0 {
            return Err(Error::config("input shape has a zero dimension"));
        }
        let (mut h, mut w) = (self.input.height, self.input.width);
        for (b, block) in self.blocks.iter().enumerate() {
            if block.channels == 0 {
                return Err(Error::config(format!("block {b} has zero channels")));
            }
            if block.pool {
                if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                    return Err(Error::config(format!(
                        "block {b} pools a {h}x{w} map; pooling needs even dimensions"
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        for &t in &self.taps {
            if t >= self.blocks.len() {
                return Err(Error::config(format!(
                    "tap index {t} out of range for {} blocks",
                    self.blocks.len()
                )));
            }
        }
        if self.taps.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config("tap indices must be strictly increasing"));
        }
        for (name, v) in [("input_mean", &self.input_mean), ("input_std", &self.input_std)] {
            if !v.is_empty() && v.len() != self.input.channels {
                return Err(Error::config(format!(
                    "{name} has {} entries for {} channels",
                    v.len(),
                    self.input.channels
                )));
            }
        }
        if self.input_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("input_std entries must be positive"));
        }
        Ok(())
    }

    fn tap_indices(&self) -> Vec<usize> {
        if self.taps.is_empty() {
            (0..self.blocks.len()).collect()
        } else {
            self.taps.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockLayout {
    in_channels: usize,
    out_channels: usize,
    /// Spatial size of the block's input and conv output.
    height: usize,
    width: usize,
    pool: bool,
    weight_offset: usize,
    bias_offset: usize,
}

/// Values retained from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct CnnCache {
    /// Input to each block (after standardization / pooling).
    inputs: Vec<Array4<f64>>,
    /// Post-ReLU output of each block.
    acts: Vec<Array4<f64>>,
    /// Flattened head input (batch, features).
    features: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallCnn {
    arch: CnnArchitecture,
    layout: Vec<BlockLayout>,
    tap_blocks: Vec<usize>,
    taps: Vec<LayerDesc>,
    head_in: usize,
    head_offset: usize,
    params: Vec<f64>,
}

impl SmallCnn {
    /// Builds a network with fan-in scaled uniform initialization.
    pub fn new(arch: CnnArchitecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in model.layout.clone() {
            let fan_in = (l.in_channels * KERNEL * KERNEL) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let n = l.out_channels * l.in_channels * KERNEL * KERNEL;
            for p in &mut model.params[l.weight_offset..l.weight_offset + n] {
                *p = rng.random_range(-bound..bound);
            }
        }
        let bound = 1.0 / (model.head_in as f64).sqrt();
        let n = model.arch.num_classes * model.head_in;
        let off = model.head_offset;
        for p in &mut model.params[off..off + n] {
            *p = rng.random_range(-bound..bound);
        }
        Ok(model)
    }

    /// Builds a network with every parameter set to zero.
    pub fn zeroed(arch: CnnArchitecture) -> Result<Self> {
        arch.validate()?;
        let mut layout = Vec::with_capacity(arch.blocks.len());
        let (mut c, mut h, mut w) = (arch.input.channels, arch.input.height, arch.input.width);
        let mut offset = 0;
        for block in &arch.blocks {
            let weight_offset = offset;
            offset += block.channels * c * KERNEL * KERNEL;
            let bias_offset = offset;
            offset += block.channels;
            layout.push(BlockLayout {
                in_channels: c,
                out_channels: block.channels,
                height: h,
                width: w,
                pool: block.pool,
                weight_offset,
                bias_offset,
            });
            c = block.channels;
            if block.pool {
                h /= 2;
                w /= 2;
            }
        }
        let head_in = c * h * w;
        let head_offset = offset;
        offset += arch.num_classes * head_in + arch.num_classes;
        let tap_blocks = arch.tap_indices();
        let taps = tap_blocks
            .iter()
            .map(|&b| {
                let l = &layout[b];
                LayerDesc {
                    index: b,
                    channels: l.out_channels,
                    height: l.height,
                    width: l.width,
                }
            })
            .collect();
        Ok(Self {
            arch,
            layout,
            tap_blocks,
            taps,
            head_in,
            head_offset,
            params: vec![0.0; offset],
        })
    }

    /// Rebuilds a network from an architecture and a saved parameter vector.
    pub fn from_params(arch: CnnArchitecture, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::zeroed(arch)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn architecture(&self) -> &CnnArchitecture {
        &self.arch
    }

    /// Range of the head weight matrix (classes x features) in the flat
    /// parameter vector.
    pub fn head_weight_range(&self) -> std::ops::Range<usize> {
        self.head_offset..self.head_offset + self.arch.num_classes * self.head_in
    }

    pub fn head_bias_range(&self) -> std::ops::Range<usize> {
        let start = self.head_offset + self.arch.num_classes * self.head_in;
        start..start + self.arch.num_classes
    }

    /// Applies the head (optional pooling + linear layer) to the activation
    /// of the final block.
    pub fn head_logits(&self, final_act: &Array4<f64>) -> Array2<f64> {
        let last = self.layout.last().expect("validated: at least one block");
        let pooled = if last.pool { avg_pool(final_act) } else { final_act.clone() };
        let n = pooled.dim().0;
        let features = pooled
            .into_shape_with_order((n, self.head_in))
            .expect("head input is contiguous");
        self.linear_head(&features)
    }

    fn linear_head(&self, features: &Array2<f64>) -> Array2<f64> {
        let k = self.arch.num_classes;
        let w = &self.params[self.head_weight_range()];
        let b = &self.params[self.head_bias_range()];
        let n = features.dim().0;
        let mut logits = Array2::zeros((n, k));
        for (row, f) in logits.outer_iter_mut().zip(features.outer_iter()) {
            let f = f.as_slice().expect("contiguous");
            for (j, out) in row.into_iter().enumerate() {
                let wj = &w[j * self.head_in..(j + 1) * self.head_in];
                *out = b[j] + dot(wj, f);
            }
        }
        logits
    }

    fn standardize(&self, x: &Array4<f64>) -> Array4<f64> {
        if self.arch.input_mean.is_empty() && self.arch.input_std.is_empty() {
            return x.to_owned();
        }
        let mut z = x.to_owned();
        for (c, mut plane) in z.axis_iter_mut(Axis(1)).enumerate() {
            let m = self.arch.input_mean.get(c).copied().unwrap_or(0.0);
            let s = self.arch.input_std.get(c).copied().unwrap_or(1.0);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        z
    }
}

impl Classifier for SmallCnn {
    type Cache = CnnCache;

    fn input_shape(&self) -> InputShape {
        self.arch.input
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn tap_layers(&self) -> &[LayerDesc] {
        &self.taps
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &Array4<f64>, _mode: Mode) -> Result<ForwardPass<CnnCache>> {
        check_input(self.arch.input, x)?;
        let n = x.dim().0;
        let mut inputs = Vec::with_capacity(self.layout.len());
        let mut acts = Vec::with_capacity(self.layout.len());
        let mut current = self.standardize(x);
        for l in &self.layout {
            let w = &self.params[l.weight_offset..l.bias_offset];
            let b = &self.params[l.bias_offset..l.bias_offset + l.out_channels];
            let mut out = conv_forward(&current, w, b, l);
            out.mapv_inplace(|v| v.max(0.0));
            let next = if l.pool { avg_pool(&out) } else { out.clone() };
            inputs.push(std::mem::replace(&mut current, next));
            acts.push(out);
        }
        let features = current
            .into_shape_with_order((n, self.head_in))
            .expect("head input is contiguous");
        let logits = self.linear_head(&features);
        let taps = self.tap_blocks.iter().map(|&b| acts[b].clone()).collect();
        Ok(ForwardPass {
            logits,
            taps,
            cache: CnnCache {
                inputs,
                acts,
                features,
            },
        })
    }

    fn backward(
        &self,
        pass: &ForwardPass<CnnCache>,
        grad_logits: &Array2<f64>,
        grad_taps: Option<&[Array4<f64>]>,
        targets: GradTargets,
    ) -> Gradients {
        let cache = &pass.cache;
        let n = grad_logits.dim().0;
        let k = self.arch.num_classes;
        let mut dparams = if targets.params { vec![0.0; self.params.len()] } else { Vec::new() };

        // head
        let w = &self.params[self.head_weight_range()];
        let mut dfeat = Array2::<f64>::zeros((n, self.head_in));
        for i in 0..n {
            let g = grad_logits.row(i);
            let f = cache.features.row(i);
            let f = f.as_slice().expect("contiguous");
            let mut df = dfeat.row_mut(i);
            let df = df.as_slice_mut().expect("contiguous");
            for j in 0..k {
                let gj = g[j];
                if gj == 0.0 {
                    continue;
                }
                axpy(gj, &w[j * self.head_in..(j + 1) * self.head_in], df);
                if targets.params {
                    let start = self.head_offset + j * self.head_in;
                    axpy(gj, f, &mut dparams[start..start + self.head_in]);
                    dparams[self.head_bias_range().start + j] += gj;
                }
            }
        }

        let last = *self.layout.last().expect("validated");
        let shape = if last.pool {
            (n, last.out_channels, last.height / 2, last.width / 2)
        } else {
            (n, last.out_channels, last.height, last.width)
        };
        let mut upstream = dfeat.into_shape_with_order(shape).expect("contiguous");

        let mut input_grad = None;
        for b in (0..self.layout.len()).rev() {
            let l = self.layout[b];
            let mut dact = if l.pool { avg_pool_backward(&upstream) } else { upstream.clone() };
            if let Some(gt) = grad_taps {
                if let Some(pos) = self.tap_blocks.iter().position(|&t| t == b) {
                    dact += &gt[pos];
                }
            }
            // relu
            ndarray::Zip::from(&mut dact)
                .and(&cache.acts[b])
                .for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            let need_input = b > 0 || targets.input;
            let dw = if targets.params {
                Some(&mut dparams[l.weight_offset..l.bias_offset + l.out_channels])
            } else {
                None
            };
            let w = &self.params[l.weight_offset..l.bias_offset];
            let din = conv_backward(&cache.inputs[b], &dact, w, &l, dw, need_input);
            match din {
                Some(d) if b > 0 => upstream = d,
                Some(d) => input_grad = Some(d),
                None => break,
            }
        }

        if let Some(g) = input_grad.as_mut() {
            if !self.arch.input_std.is_empty() {
                for (c, mut plane) in g.axis_iter_mut(Axis(1)).enumerate() {
                    let s = self.arch.input_std[c];
                    plane.mapv_inplace(|v| v / s);
                }
            }
        }

        Gradients {
            params: dparams,
            input: if targets.input { input_grad } else { None },
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Output coordinates `o` for which `o + k - 1` lies inside `[0, size)`.
#[inline]
fn valid_range(k: usize, size: usize) -> (usize, usize) {
    let start = 1usize.saturating_sub(k);
    let end = (size + 1).saturating_sub(k).min(size);
    (start, end)
}

/// Patch matrix of shape (in_channels * 9, n * h * w).
fn im2col(x: &Array4<f64>, l: &BlockLayout) -> Array2<f64> {
    let n = x.dim().0;
    let (h, wd) = (l.height, l.width);
    let plane = h * wd;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((l.in_channels * KERNEL * KERNEL, n * plane));
    let cs = cols.as_slice_mut().expect("standard layout");
    let row_len = n * plane;
    for i in 0..l.in_channels {
        for ky in 0..KERNEL {
            let (y0, y1) = valid_range(ky, h);
            for kx in 0..KERNEL {
                let (x0, x1) = valid_range(kx, wd);
                let len = x1 - x0;
                let row = &mut cs[((i * KERNEL + ky) * KERNEL + kx) * row_len..][..row_len];
                for s in 0..n {
                    let xi = &xs[(s * l.in_channels + i) * plane..][..plane];
                    for yy in y0..y1 {
                        let src = (yy + ky - 1) * wd + x0 + kx - 1;
                        let dst = s * plane + yy * wd + x0;
                        row[dst..dst + len].copy_from_slice(&xi[src..src + len]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Array2<f64>, l: &BlockLayout, n: usize) -> Array4<f64> {
    let (h, wd) = (l.height, l.width);
    let plane = h * wd;
    let mut out = Array4::<f64>::zeros((n, l.in_channels, h, wd));
    let os = out.as_slice_mut().expect("standard layout");
    let cs = cols.as_slice().expect("standard layout");
    let row_len = n * plane;
    for i in 0..l.in_channels {
        for ky in 0..KERNEL {
            let (y0, y1) = valid_range(ky, h);
            for kx in 0..KERNEL {
                let (x0, x1) = valid_range(kx, wd);
                let len = x1 - x0;
                let row = &cs[((i * KERNEL + ky) * KERNEL + kx) * row_len..][..row_len];
                for s in 0..n {
                    let oi = &mut os[(s * l.in_channels + i) * plane..][..plane];
                    for yy in y0..y1 {
                        let dst = (yy + ky - 1) * wd + x0 + kx - 1;
                        let src = s * plane + yy * wd + x0;
                        axpy(1.0, &row[src..src + len], &mut oi[dst..dst + len]);
                    }
                }
            }
        }
    }
    out
}

fn weight_matrix<'a>(w: &'a [f64], l: &BlockLayout) -> ndarray::ArrayView2<'a, f64> {
    ndarray::ArrayView2::from_shape((l.out_channels, l.in_channels * KERNEL * KERNEL), w).expect("weight block")
}

fn conv_forward(x: &Array4<f64>, w: &[f64], b: &[f64], l: &BlockLayout) -> Array4<f64> {
    let n = x.dim().0;
    let plane = l.height * l.width;
    let y = weight_matrix(w, l).dot(&im2col(x, l));
    let ys = y.as_slice().expect("standard layout");
    let mut out = Array4::<f64>::zeros((n, l.out_channels, l.height, l.width));
    let os = out.as_slice_mut().expect("standard layout");
    for s in 0..n {
        for o in 0..l.out_channels {
            let dst = &mut os[(s * l.out_channels + o) * plane..][..plane];
            let src = &ys[o * n * plane + s * plane..][..plane];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v + b[o];
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `dparams` (laid out as weights then
/// bias) and returns the gradient w.r.t. the block input when requested.
fn conv_backward(
    x: &Array4<f64>,
    dout: &Array4<f64>,
    w: &[f64],
    l: &BlockLayout,
    dparams: Option<&mut [f64]>,
    need_input: bool,
) -> Option<Array4<f64>> {
    let n = x.dim().0;
    let plane = l.height * l.width;
    let ds = dout.as_slice().expect("standard layout");
    // (out, n * plane)
    let mut dy = Array2::<f64>::zeros((l.out_channels, n * plane));
    {
        let dys = dy.as_slice_mut().expect("standard layout");
        for s in 0..n {
            for o in 0..l.out_channels {
                dys[o * n * plane + s * plane..][..plane].copy_from_slice(&ds[(s * l.out_channels + o) * plane..][..plane]);
            }
        }
    }
    if let Some(dp) = dparams {
        let nw = l.out_channels * l.in_channels * KERNEL * KERNEL;
        let dw = dy.dot(&im2col(x, l).t());
        for (d, v) in dp[..nw].iter_mut().zip(dw.iter()) {
            *d += v;
        }
        for (o, row) in dy.outer_iter().enumerate() {
            dp[nw + o] += row.sum();
        }
    }
    need_input.then(|| col2im_add(&weight_matrix(w, l).t().dot(&dy), l, n))
}

fn avg_pool(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h / 2, w / 2));
    for ((s, ch, yy, xx), v) in out.indexed_iter_mut() {
        let (y2, x2) = (2 * yy, 2 * xx);
        *v = 0.25
            * (x[[s, ch, y2, x2]] + x[[s, ch, y2, x2 + 1]] + x[[s, ch, y2 + 1, x2]] + x[[s, ch, y2 + 1, x2 + 1]]);
    }
    out
}

fn avg_pool_backward(g: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = g.dim();
    let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
    for ((s, ch, yy, xx), v) in out.indexed_iter_mut() {
        *v = 0.25 * g[[s, ch, yy / 2, xx / 2]];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, shape: InputShape, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, shape.channels, shape.height, shape.width), |_| rng.random::<f64>())
    }

    #[test]
    fn toy_model_has_declared_shapes() {
        let model = SmallCnn::new(CnnArchitecture::toy(10), 1).unwrap();
        let x = batch(4, model.input_shape(), 2);
        let pass = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(pass.logits.dim(), (4, 10));
        assert_eq!(pass.taps.len(), 3);
        for (tap, desc) in pass.taps.iter().zip(model.tap_layers()) {
            assert_eq!(tap.dim(), (4, desc.channels, desc.height, desc.width));
        }
        assert!(model.num_params() <= 1300);
    }

    #[test]
    fn toy_two_class_model_fits_gradient_check_budget() {
        let model = SmallCnn::new(CnnArchitecture::toy(2), 1).unwrap();
        assert!(model.num_params() <= 1000, "{}", model.num_params());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut model = SmallCnn::new(CnnArchitecture::toy(10), 3).unwrap();
        let range = model.head_weight_range().start..model.head_bias_range().end;
        model.params_mut()[range].fill(0.0);
        let x = batch(3, model.input_shape(), 4);
        let logits = model.logits(&x, Mode::Eval).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_reproducible() {
        let model = SmallCnn::new(CnnArchitecture::toy(4), 7).unwrap();
        let x = batch(5, model.input_shape(), 8);
        let a = model.logits(&x, Mode::Eval).unwrap();
        let b = model.logits(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_on_final_tap_reproduces_logits() {
        let model = SmallCnn::new(CnnArchitecture::toy(3), 5).unwrap();
        let x = batch(6, model.input_shape(), 9);
        let pass = model.forward(&x, Mode::Eval).unwrap();
        let again = model.head_logits(pass.taps.last().unwrap());
        assert_eq!(again, pass.logits);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = SmallCnn::new(CnnArchitecture::toy(2), 0).unwrap();
        let x = Array4::zeros((2, 3, 8, 8));
        assert!(matches!(model.forward(&x, Mode::Eval), Err(Error::Shape { .. })));
    }

    #[test]
    fn odd_pooling_is_rejected() {
        let mut arch = CnnArchitecture::toy(2);
        arch.input = InputShape::new(1, 7, 7);
        assert!(SmallCnn::new(arch, 0).is_err());
    }

    #[test]
    fn tap_subset_is_respected() {
        let mut arch = CnnArchitecture::toy(2);
        arch.taps = vec![1, 2];
        let model = SmallCnn::new(arch, 0).unwrap();
        assert_eq!(model.tap_layers().len(), 2);
        assert_eq!(model.tap_layers()[0].index, 1);
        assert_eq!(model.tap_layers()[0].height, 4);
    }

    #[test]
    fn same_seed_same_init() {
        let a = SmallCnn::new(CnnArchitecture::toy(2), 11).unwrap();
        let b = SmallCnn::new(CnnArchitecture::toy(2), 11).unwrap();
        let c = SmallCnn::new(CnnArchitecture::toy(2), 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }
}
